//! Stacked rescaled residual/Jacobian system `(F̃, J̃)` and its per-point
//! parameter derivatives.

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{jac_pose, residual, skew, Camera, Correspondence, CorrespondenceSet, Pose};
use crate::pnp::kernel::Huber;

#[derive(Debug, Clone)]
pub struct RobustSystem {
    /// Rescaled residuals, length 2N.
    pub f: DVector<f64>,
    /// Rescaled Jacobian, 2N×d.
    pub j: DMatrix<f64>,
    /// Indices of behind-camera points (zero rows).
    pub invalid: Vec<usize>,
    /// `½ Σ ρ(‖f_i‖²)` over valid points.
    pub cost: f64,
}

impl RobustSystem {
    pub fn gradient(&self) -> DVector<f64> {
        self.j.tr_mul(&self.f)
    }

    pub fn normal_matrix(&self) -> DMatrix<f64> {
        self.j.tr_mul(&self.j)
    }
}

/// Builds `f̃_i = √ρ′_i f_i`, `J̃_i = √ρ′_i J_i` for every point.
pub fn build_system(set: &CorrespondenceSet, pose: &Pose, huber: &Huber) -> Result<RobustSystem> {
    build_system_subset(set, None, pose, huber)
}

pub(crate) fn build_system_subset(
    set: &CorrespondenceSet,
    subset: Option<&[usize]>,
    pose: &Pose,
    huber: &Huber,
) -> Result<RobustSystem> {
    let d = pose.dof();
    let idx: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..set.len()).collect(),
    };
    let mut f = DVector::zeros(2 * idx.len());
    let mut j = DMatrix::zeros(2 * idx.len(), d);
    let mut invalid = Vec::new();
    let mut cost = 0.0;
    for (row, &i) in idx.iter().enumerate() {
        let p = &set.points[i];
        let res = match residual(pose, p, &set.camera) {
            Ok(r) => r,
            Err(Error::BehindCamera { .. }) => {
                invalid.push(i);
                continue;
            }
            Err(e) => return Err(e),
        };
        let s = res.f.norm_squared();
        cost += 0.5 * huber.cost(s);
        let scale = huber.derivative(s).sqrt();
        let ji = jac_pose(pose, p, &set.camera)?;
        f.fixed_rows_mut::<2>(2 * row).copy_from(&(res.f * scale));
        j.view_mut((2 * row, 0), (2, d)).copy_from(&(ji * scale));
    }
    if invalid.len() == idx.len() {
        return Err(Error::AllPointsInvalid);
    }
    Ok(RobustSystem { f, j, invalid, cost })
}

/// Number of per-point learnable parameters: x3d (3), x2d (2), w2d (2).
pub const POINT_PARAMS: usize = 7;

/// One point's rescaled block and its derivatives w.r.t. the point's own
/// parameters, ordered as `[x3d, x2d, w2d]`. δ is held constant.
#[derive(Debug, Clone)]
pub struct PointBlock {
    pub f: Vector2<f64>,
    pub j: DMatrix<f64>,
    pub df: [Vector2<f64>; POINT_PARAMS],
    pub dj: Vec<DMatrix<f64>>,
}

pub fn point_block(pose: &Pose, corr: &Correspondence, camera: &Camera, huber: &Huber) -> Result<PointBlock> {
    let rot = pose.rotation();
    let p = rot * corr.x3d + pose.translation();
    let uv = camera.project(&p)?;
    let r = uv - corr.x2d;
    let w = corr.w2d;
    let f = w.component_mul(&r);
    let pj = camera.project_jacobian(&p);
    let g = pose.point_jacobian(&corr.x3d);
    let pj_dyn = DMatrix::from_column_slice(2, 3, pj.as_slice());
    let pg = &pj_dyn * &g;
    let mut j = pg.clone();
    j.row_mut(0).scale_mut(w.x);
    j.row_mut(1).scale_mut(w.y);
    let d = pose.dof();

    let mut df = [Vector2::zeros(); POINT_PARAMS];
    let mut dj = vec![DMatrix::zeros(2, d); POINT_PARAMS];

    for k in 0..3 {
        let a: Vector3<f64> = rot.column(k).into_owned();
        let dp = pj * a;
        df[k] = w.component_mul(&dp);
        let dpj = projection_jacobian_derivative(camera, &p, &a);
        let dpj_dyn = DMatrix::from_column_slice(2, 3, dpj.as_slice());
        let mut m = &dpj_dyn * &g + &pj_dyn * point_jacobian_derivative(pose, &a, k);
        m.row_mut(0).scale_mut(w.x);
        m.row_mut(1).scale_mut(w.y);
        dj[k] = m;
    }
    df[3] = Vector2::new(-w.x, 0.0);
    df[4] = Vector2::new(0.0, -w.y);
    df[5] = Vector2::new(r.x, 0.0);
    df[6] = Vector2::new(0.0, r.y);
    dj[5].row_mut(0).copy_from(&pg.row(0));
    dj[6].row_mut(1).copy_from(&pg.row(1));

    let s = f.norm_squared();
    if !huber.is_active(s) {
        return Ok(PointBlock { f, j, df, dj });
    }
    let sigma = huber.derivative(s).sqrt();
    let mut out = PointBlock { f: f * sigma, j: &j * sigma, df, dj };
    for k in 0..POINT_PARAMS {
        let dsigma = -0.5 * sigma * f.dot(&out.df[k]) / s;
        out.df[k] = out.df[k] * sigma + f * dsigma;
        out.dj[k] = &out.dj[k] * sigma + &j * dsigma;
    }
    Ok(out)
}

/// Directional derivative of the projection Jacobian along `a`.
fn projection_jacobian_derivative(camera: &Camera, p: &Vector3<f64>, a: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    Matrix2x3::new(
        -camera.fx * a.z * iz2,
        0.0,
        -camera.fx * a.x * iz2 + 2.0 * camera.fx * p.x * a.z * iz3,
        0.0,
        -camera.fy * a.z * iz2,
        -camera.fy * a.y * iz2 + 2.0 * camera.fy * p.y * a.z * iz3,
    )
}

/// Derivative of `∂(Rx+t)/∂y` w.r.t. `x3d[k]`, with `a = R e_k`.
fn point_jacobian_derivative(pose: &Pose, a: &Vector3<f64>, k: usize) -> DMatrix<f64> {
    let mut e = Vector3::zeros();
    e[k] = 1.0;
    // point_jacobian is linear in x, so its derivative along e_k is itself at e_k
    // minus the constant translation block
    match pose {
        Pose::YawOnly { .. } => pose.point_jacobian(&e),
        Pose::Yaw4DoF { .. } => {
            let mut m = pose.point_jacobian(&e);
            m.view_mut((0, 0), (3, 3)).fill(0.0);
            m
        }
        Pose::Quat6DoF { .. } => {
            let mut m = DMatrix::zeros(3, 6);
            m.view_mut((0, 3), (3, 3)).copy_from(&(-skew(a)));
            m
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn instance() -> (Pose, Correspondence, Camera) {
        let pose = Pose::quat6(Vector3::new(0.1, -0.05, 3.5), [0.2, -0.1, 0.3, 0.9]).unwrap();
        let corr = Correspondence::new(Vector3::new(0.2, -0.3, 0.1), Vector2::new(330.0, 215.0), Vector2::new(0.8, 1.7));
        (pose, corr, Camera::new(500.0, 520.0, 320.0, 240.0).unwrap())
    }

    #[test]
    fn inactive_kernel_leaves_system_unscaled() {
        let (pose, corr, cam) = instance();
        let set = CorrespondenceSet::new(vec![corr; 3], cam);
        let sys = build_system(&set, &pose, &Huber::new(1e9)).unwrap();
        let res = residual(&pose, &corr, &cam).unwrap();
        assert_eq!(sys.f[0], res.f.x);
        assert_eq!(sys.j.view((0, 0), (2, 6)), jac_pose(&pose, &corr, &cam).unwrap());
    }

    #[test]
    fn point_at_twice_threshold_is_scaled_by_sqrt_half() {
        let (pose, corr, cam) = instance();
        let fnorm = residual(&pose, &corr, &cam).unwrap().f.norm();
        let set = CorrespondenceSet::new(vec![corr], cam);
        let plain = build_system(&set, &pose, &Huber::new(1e9)).unwrap();
        let sys = build_system(&set, &pose, &Huber::new(fnorm / 2.0)).unwrap();
        assert_relative_eq!(sys.f, &plain.f * 0.5f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(sys.j, &plain.j * 0.5f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn behind_camera_rows_are_zero() {
        let (pose, corr, cam) = instance();
        let behind = Correspondence { x3d: Vector3::new(0.0, 0.0, -10.0), ..corr };
        let set = CorrespondenceSet::new(vec![corr, behind], cam);
        let sys = build_system(&set, &pose, &Huber::new(1.0)).unwrap();
        assert_eq!(sys.invalid, vec![1]);
        assert!(sys.f.rows(2, 2).iter().all(|v| *v == 0.0));
        let all_bad = CorrespondenceSet::new(vec![behind], cam);
        assert!(matches!(build_system(&all_bad, &pose, &Huber::new(1.0)), Err(Error::AllPointsInvalid)));
    }

    fn perturbed(corr: &Correspondence, k: usize, h: f64) -> Correspondence {
        let mut c = *corr;
        match k {
            0..=2 => c.x3d[k] += h,
            3 | 4 => c.x2d[k - 3] += h,
            _ => c.w2d[k - 5] += h,
        }
        c
    }

    fn rescaled(pose: &Pose, corr: &Correspondence, cam: &Camera, huber: &Huber) -> (Vector2<f64>, DMatrix<f64>) {
        let s = residual(pose, corr, cam).unwrap().f;
        let sc = huber.derivative(s.norm_squared()).sqrt();
        (s * sc, jac_pose(pose, corr, cam).unwrap() * sc)
    }

    #[test]
    fn block_derivatives_match_central_differences() {
        let poses = [
            instance().0,
            Pose::yaw4(Vector3::new(0.2, 0.1, 4.0), 0.6),
            Pose::yaw_only(-1.1, Vector3::new(-0.1, 0.0, 3.0)),
        ];
        let (_, corr, cam) = instance();
        for pose in poses {
            let fnorm = residual(&pose, &corr, &cam).unwrap().f.norm();
            for huber in [Huber::new(fnorm * 10.0), Huber::new(fnorm * 0.3)] {
                let blk = point_block(&pose, &corr, &cam, &huber).unwrap();
                for k in 0..POINT_PARAMS {
                    let h = 1e-6;
                    let (fp, jp) = rescaled(&pose, &perturbed(&corr, k, h), &cam, &huber);
                    let (fm, jm) = rescaled(&pose, &perturbed(&corr, k, -h), &cam, &huber);
                    let dfd = (fp - fm) / (2.0 * h);
                    let djd = (jp - jm) / (2.0 * h);
                    let fscale = dfd.amax().max(1e-3);
                    assert!((blk.df[k] - dfd).amax() / fscale < 1e-5, "df param {k}: {} vs {}", blk.df[k], dfd);
                    let jscale = djd.amax().max(1e-3);
                    assert!((&blk.dj[k] - &djd).amax() / jscale < 1e-5, "dJ param {k}");
                }
            }
        }
    }
}
