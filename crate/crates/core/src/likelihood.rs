//! Robust likelihood `log p(X|y) = −½ Σ ρ(‖f_i(y)‖²)`.

use crate::geometry::{residual, CorrespondenceSet, Pose};
use crate::pnp::kernel::Huber;

/// Robust cost `½ Σ ρ(‖f_i‖²)`; `+∞` when a weighted point is behind the camera.
pub fn robust_cost(set: &CorrespondenceSet, pose: &Pose, huber: &Huber) -> f64 {
    let mut cost = 0.0;
    for p in &set.points {
        let weighted = p.w2d.x != 0.0 || p.w2d.y != 0.0;
        match residual(pose, p, &set.camera) {
            Ok(res) => cost += 0.5 * huber.cost(res.f.norm_squared()),
            Err(_) if weighted => return f64::INFINITY,
            Err(_) => {}
        }
    }
    cost
}

/// `log p(X|y)`, always `≤ 0`; `−∞` if any weighted point falls behind the camera.
pub fn log_likelihood(set: &CorrespondenceSet, pose: &Pose, huber: &Huber) -> f64 {
    -robust_cost(set, pose, huber)
}
