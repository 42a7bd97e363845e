//! Pinhole camera, pose parameterizations, reprojection residuals and their
//! analytic Jacobians.
//!
//! Conventions:
//! - yaw rotates about the camera Y axis, so the ground plane is XZ;
//! - pose tangent coordinates are ordered translation first, rotation last
//!   (`[θ]`, `[tx, ty, tz, θ]`, `[tx, ty, tz, ωx, ωy, ωz]`);
//! - quaternion updates are left perturbations `q ← exp(ω) ⊗ q` followed by
//!   renormalization.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::pnp::kernel::Huber;

/// Minimum camera-frame depth for a point to be considered projectable.
pub const Z_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("camera intrinsics must be finite".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(p_cam.z > Z_MIN) {
            return Err(Error::BehindCamera { depth: p_cam.z, z_min: Z_MIN });
        }
        Ok(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Derivative of the projection w.r.t. the camera-frame point.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz, 0.0, -self.fx * p.x * iz2,
            0.0, self.fy * iz, -self.fy * p.y * iz2,
        )
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2π
    if w >= PI { w - 2.0 * PI } else { w }
}

pub fn yaw_rotation(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn yaw_rotation_derivative(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Which family of poses a problem is posed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoseSpace {
    /// Yaw angle only; translation is known.
    YawOnly { t_fixed: Vector3<f64> },
    /// Yaw plus free translation.
    Yaw4DoF,
    /// Full rotation (unit quaternion) plus translation.
    Quat6DoF,
}

impl PoseSpace {
    pub fn dof(&self) -> usize {
        match self {
            PoseSpace::YawOnly { .. } => 1,
            PoseSpace::Yaw4DoF => 4,
            PoseSpace::Quat6DoF => 6,
        }
    }

    pub fn min_points(&self) -> usize {
        match self {
            PoseSpace::YawOnly { .. } => 2,
            PoseSpace::Yaw4DoF => 3,
            PoseSpace::Quat6DoF => 4,
        }
    }

    pub fn has_translation(&self) -> bool {
        !matches!(self, PoseSpace::YawOnly { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoseSpace::YawOnly { .. } => "yaw_only",
            PoseSpace::Yaw4DoF => "yaw4dof",
            PoseSpace::Quat6DoF => "quat6dof",
        }
    }

    /// The identity-rotation pose at translation `t` (ignored for yaw-only).
    pub fn pose_at(&self, t: Vector3<f64>) -> Pose {
        match *self {
            PoseSpace::YawOnly { t_fixed } => Pose::YawOnly { theta: 0.0, t_fixed },
            PoseSpace::Yaw4DoF => Pose::Yaw4DoF { t, theta: 0.0 },
            PoseSpace::Quat6DoF => Pose::Quat6DoF { t, q: UnitQuaternion::identity() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pose {
    YawOnly { theta: f64, t_fixed: Vector3<f64> },
    Yaw4DoF { t: Vector3<f64>, theta: f64 },
    Quat6DoF { t: Vector3<f64>, q: UnitQuaternion<f64> },
}

impl Pose {
    pub fn yaw_only(theta: f64, t_fixed: Vector3<f64>) -> Self {
        Pose::YawOnly { theta: wrap_angle(theta), t_fixed }
    }

    pub fn yaw4(t: Vector3<f64>, theta: f64) -> Self {
        Pose::Yaw4DoF { t, theta: wrap_angle(theta) }
    }

    /// Builds a 6DoF pose from a quaternion given as `[x, y, z, w]`.
    pub fn quat6(t: Vector3<f64>, xyzw: [f64; 4]) -> Result<Self> {
        let q = Quaternion::new(xyzw[3], xyzw[0], xyzw[1], xyzw[2]);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidInput("quaternion has zero or non-finite norm".into()));
        }
        Ok(Pose::Quat6DoF { t, q: UnitQuaternion::new_normalize(q) })
    }

    pub fn space(&self) -> PoseSpace {
        match *self {
            Pose::YawOnly { t_fixed, .. } => PoseSpace::YawOnly { t_fixed },
            Pose::Yaw4DoF { .. } => PoseSpace::Yaw4DoF,
            Pose::Quat6DoF { .. } => PoseSpace::Quat6DoF,
        }
    }

    pub fn dof(&self) -> usize {
        self.space().dof()
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        match self {
            Pose::YawOnly { theta, .. } | Pose::Yaw4DoF { theta, .. } => yaw_rotation(*theta),
            Pose::Quat6DoF { q, .. } => q.to_rotation_matrix().into_inner(),
        }
    }

    pub fn translation(&self) -> Vector3<f64> {
        match self {
            Pose::YawOnly { t_fixed, .. } => *t_fixed,
            Pose::Yaw4DoF { t, .. } | Pose::Quat6DoF { t, .. } => *t,
        }
    }

    /// Yaw angle for yaw-parameterized poses.
    pub fn yaw(&self) -> Option<f64> {
        match self {
            Pose::YawOnly { theta, .. } | Pose::Yaw4DoF { theta, .. } => Some(*theta),
            Pose::Quat6DoF { .. } => None,
        }
    }

    /// Unit quaternion as a 4-vector `[x, y, z, w]`.
    pub fn quaternion_vector(&self) -> Option<Vector4<f64>> {
        match self {
            Pose::Quat6DoF { q, .. } => Some(q.coords),
            _ => None,
        }
    }

    pub fn transform(&self, x3d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x3d + self.translation()
    }

    pub fn is_finite(&self) -> bool {
        let t = self.translation();
        let rot_ok = match self {
            Pose::YawOnly { theta, .. } | Pose::Yaw4DoF { theta, .. } => theta.is_finite(),
            Pose::Quat6DoF { q, .. } => q.coords.iter().all(|v| v.is_finite()),
        };
        rot_ok && t.iter().all(|v| v.is_finite())
    }

    /// Applies a tangent-space increment.
    pub fn retract(&self, delta: &[f64]) -> Pose {
        assert_eq!(delta.len(), self.dof(), "tangent increment has wrong dimension");
        match *self {
            Pose::YawOnly { theta, t_fixed } => Pose::yaw_only(theta + delta[0], t_fixed),
            Pose::Yaw4DoF { t, theta } => {
                Pose::yaw4(t + Vector3::new(delta[0], delta[1], delta[2]), theta + delta[3])
            }
            Pose::Quat6DoF { t, q } => {
                let omega = Vector3::new(delta[3], delta[4], delta[5]);
                let dq = UnitQuaternion::from_scaled_axis(omega);
                let q_new = UnitQuaternion::new_normalize((dq * q).into_inner());
                Pose::Quat6DoF { t: t + Vector3::new(delta[0], delta[1], delta[2]), q: q_new }
            }
        }
    }

    /// Derivative of the camera-frame point `R x + t` w.r.t. the tangent
    /// coordinates, as a 3×d matrix.
    pub fn point_jacobian(&self, x3d: &Vector3<f64>) -> DMatrix<f64> {
        match *self {
            Pose::YawOnly { theta, .. } => {
                let c = yaw_rotation_derivative(theta) * x3d;
                DMatrix::from_column_slice(3, 1, c.as_slice())
            }
            Pose::Yaw4DoF { theta, .. } => {
                let c = yaw_rotation_derivative(theta) * x3d;
                let mut m = DMatrix::zeros(3, 4);
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
                m.fixed_view_mut::<3, 1>(0, 3).copy_from(&c);
                m
            }
            Pose::Quat6DoF { q, .. } => {
                let rx = q * x3d;
                let mut m = DMatrix::zeros(3, 6);
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
                m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&rx)));
                m
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub x3d: Vector3<f64>,
    pub x2d: Vector2<f64>,
    pub w2d: Vector2<f64>,
}

impl Correspondence {
    pub fn new(x3d: Vector3<f64>, x2d: Vector2<f64>, w2d: Vector2<f64>) -> Self {
        Self { x3d, x2d, w2d }
    }

    pub fn is_valid(&self) -> bool {
        self.x3d.iter().chain(self.x2d.iter()).chain(self.w2d.iter()).all(|v| v.is_finite())
            && self.w2d.x >= 0.0
            && self.w2d.y >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub points: Vec<Correspondence>,
    pub camera: Camera,
}

impl CorrespondenceSet {
    pub fn new(points: Vec<Correspondence>, camera: Camera) -> Self {
        Self { points, camera }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks finiteness, weight signs and the point-count minimum for `space`.
    pub fn validate(&self, space: &PoseSpace) -> Result<()> {
        self.camera.validate()?;
        if let Some(i) = self.points.iter().position(|p| !p.is_valid()) {
            return Err(Error::InvalidInput(format!(
                "correspondence {i} has non-finite values or negative weights"
            )));
        }
        if self.points.len() < space.min_points() {
            return Err(Error::InvalidInput(format!(
                "{} pose space needs at least {} points, got {}",
                space.name(),
                space.min_points(),
                self.points.len()
            )));
        }
        if self.points.iter().all(|p| p.w2d.x == 0.0 && p.w2d.y == 0.0) {
            return Err(Error::DegenerateSet("all weights are zero".into()));
        }
        Ok(())
    }

    pub fn with_weights_scaled(&self, scale: f64) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| Correspondence { w2d: p.w2d * scale, ..*p })
            .collect();
        Self { points, camera: self.camera }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    /// Unweighted reprojection error.
    pub r: Vector2<f64>,
    /// Weighted reprojection error `w ∘ r`.
    pub f: Vector2<f64>,
}

pub fn transform(pose: &Pose, x3d: &Vector3<f64>) -> Vector3<f64> {
    pose.transform(x3d)
}

pub fn project(camera: &Camera, p_cam: &Vector3<f64>) -> Result<Vector2<f64>> {
    camera.project(p_cam)
}

pub fn residual(pose: &Pose, corr: &Correspondence, camera: &Camera) -> Result<Residual> {
    let uv = camera.project(&pose.transform(&corr.x3d))?;
    let r = uv - corr.x2d;
    Ok(Residual { r, f: corr.w2d.component_mul(&r) })
}

/// Jacobian (2×d) of the weighted residual `f` w.r.t. the pose tangent.
pub fn jac_pose(pose: &Pose, corr: &Correspondence, camera: &Camera) -> Result<DMatrix<f64>> {
    let p = pose.transform(&corr.x3d);
    camera.project(&p)?;
    let mut pj = camera.project_jacobian(&p);
    pj.row_mut(0).scale_mut(corr.w2d.x);
    pj.row_mut(1).scale_mut(corr.w2d.y);
    let pj = DMatrix::from_column_slice(2, 3, pj.as_slice());
    Ok(pj * pose.point_jacobian(&corr.x3d))
}

/// Gradient of the per-point robust cost `c = ½ρ(‖f‖²)` w.r.t. one
/// correspondence's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrGrad {
    pub x3d: Vector3<f64>,
    pub x2d: Vector2<f64>,
    pub w2d: Vector2<f64>,
}

impl CorrGrad {
    pub fn zeros() -> Self {
        Self { x3d: Vector3::zeros(), x2d: Vector2::zeros(), w2d: Vector2::zeros() }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { x3d: self.x3d * s, x2d: self.x2d * s, w2d: self.w2d * s }
    }

    pub fn add_scaled(&mut self, other: &CorrGrad, s: f64) {
        self.x3d += other.x3d * s;
        self.x2d += other.x2d * s;
        self.w2d += other.w2d * s;
    }

    pub fn sub(&self, other: &CorrGrad) -> Self {
        Self { x3d: self.x3d - other.x3d, x2d: self.x2d - other.x2d, w2d: self.w2d - other.w2d }
    }

    pub fn from_array(a: &[f64; 7]) -> Self {
        Self { x3d: Vector3::new(a[0], a[1], a[2]), x2d: Vector2::new(a[3], a[4]), w2d: Vector2::new(a[5], a[6]) }
    }

    /// Flattened as `[x3d(3), x2d(2), w2d(2)]`.
    pub fn to_array(&self) -> [f64; 7] {
        [self.x3d.x, self.x3d.y, self.x3d.z, self.x2d.x, self.x2d.y, self.w2d.x, self.w2d.y]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Per-point robust cost together with its gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointCost {
    pub cost: f64,
    pub grad: CorrGrad,
    pub residual: Residual,
    /// Huber derivative factor ρ′ at this point.
    pub rho_prime: f64,
}

pub fn point_cost(
    pose: &Pose,
    corr: &Correspondence,
    camera: &Camera,
    huber: &Huber,
) -> Result<PointCost> {
    let rot = pose.rotation();
    let p = rot * corr.x3d + pose.translation();
    let uv = camera.project(&p)?;
    let r = uv - corr.x2d;
    let f = corr.w2d.component_mul(&r);
    let s = f.norm_squared();
    let rho_prime = huber.derivative(s);
    let g = f * rho_prime;
    let wg = corr.w2d.component_mul(&g);
    let x3d = rot.transpose() * (camera.project_jacobian(&p).transpose() * wg);
    Ok(PointCost {
        cost: 0.5 * huber.cost(s),
        grad: CorrGrad { x3d, x2d: -wg, w2d: g.component_mul(&r) },
        residual: Residual { r, f },
        rho_prime,
    })
}

/// Gradient of `½ρ(‖f‖²)` w.r.t. x3d, x2d and w2d, Huber factor included.
pub fn jac_correspondence(
    pose: &Pose,
    corr: &Correspondence,
    camera: &Camera,
    huber: &Huber,
) -> Result<CorrGrad> {
    point_cost(pose, corr, camera, huber).map(|pc| pc.grad)
}

/// Geodesic angle between two rotation matrices, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near zero; use the antisymmetric part there
    if c > 0.99 {
        let v = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
        (0.5 * v.norm()).clamp(-1.0, 1.0).asin()
    } else {
        c.acos()
    }
}
