//! Synthetic problem generators shared by the toy learner, tests and benches.

use std::f64::consts::PI;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::{Camera, Correspondence, CorrespondenceSet, Pose};

pub fn default_camera() -> Camera {
    Camera { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0 }
}

/// Uniformly distributed unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion<f64> {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let q = Quaternion::new(v[3], v[0], v[1], v[2]);
        if q.norm() > 1e-6 {
            return UnitQuaternion::new_normalize(q);
        }
    }
}

/// Random 6DoF pose roughly 3–6 m in front of the camera.
pub fn random_pose_6dof<R: Rng + ?Sized>(rng: &mut R) -> Pose {
    let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(3.0..6.0));
    Pose::Quat6DoF { t, q: random_rotation(rng) }
}

pub fn random_pose_4dof<R: Rng + ?Sized>(rng: &mut R) -> Pose {
    let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(3.0..6.0));
    Pose::yaw4(t, rng.random_range(-PI..PI))
}

/// Points uniform in a cube of the given half extent.
pub fn random_points<R: Rng + ?Sized>(n: usize, half_extent: f64, rng: &mut R) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-half_extent..half_extent)))
        .collect()
}

/// Exact projections of `shape` under `pose` with the given uniform weights.
pub fn project_shape(pose: &Pose, shape: &[Vector3<f64>], camera: &Camera, w: Vector2<f64>) -> CorrespondenceSet {
    let points = shape
        .iter()
        .map(|x| {
            let uv = camera.project(&pose.transform(x)).expect("synthetic point behind camera");
            Correspondence::new(*x, uv, w)
        })
        .collect();
    CorrespondenceSet::new(points, *camera)
}

/// `n` random points in a 0.5 m cube, projected exactly, unit weights.
pub fn noise_free_set<R: Rng + ?Sized>(pose: &Pose, n: usize, rng: &mut R) -> CorrespondenceSet {
    let shape = random_points(n, 0.25, rng);
    project_shape(pose, &shape, &default_camera(), Vector2::new(1.0, 1.0))
}

/// Square corners in the XZ plane, invariant under 90° yaw.
pub fn square_corners(half_side: f64) -> [Vector3<f64>; 4] {
    [
        Vector3::new(half_side, 0.0, half_side),
        Vector3::new(-half_side, 0.0, half_side),
        Vector3::new(-half_side, 0.0, -half_side),
        Vector3::new(half_side, 0.0, -half_side),
    ]
}

/// Yaw-only correspondence set with an exact 4-fold yaw symmetry: every
/// observed corner is paired with every model corner, all with weight `w`.
pub fn symmetric_square_set(theta_gt: f64, t_fixed: Vector3<f64>, half_side: f64, w: f64) -> (CorrespondenceSet, Pose) {
    let camera = default_camera();
    let gt = Pose::yaw_only(theta_gt, t_fixed);
    // lift the square above the optical axis so it does not project to a line
    let corners = square_corners(half_side).map(|c| c + Vector3::new(0.0, -0.6 * half_side, 0.0));
    let observed: Vec<Vector2<f64>> = corners.iter().map(|c| camera.project(&gt.transform(c)).unwrap()).collect();
    let mut points = Vec::with_capacity(16);
    for uv in &observed {
        for c in &corners {
            points.push(Correspondence::new(*c, *uv, Vector2::new(w, w)));
        }
    }
    (CorrespondenceSet::new(points, camera), gt)
}
