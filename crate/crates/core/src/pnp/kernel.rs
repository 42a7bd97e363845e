//! Huber kernel and the per-object adaptive threshold.

use crate::error::{Error, Result};
use crate::geometry::CorrespondenceSet;

/// Huber kernel on squared error `s = ‖f‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Huber {
    pub delta: f64,
}

impl Huber {
    pub fn new(delta: f64) -> Self {
        debug_assert!(delta > 0.0);
        Self { delta }
    }

    /// `s` if `s ≤ δ²`, else `δ(2√s − δ)`.
    pub fn cost(&self, s: f64) -> f64 {
        huber(s, self.delta)
    }

    /// `dρ/ds`: 1 inside the threshold, `δ/√s` outside.
    pub fn derivative(&self, s: f64) -> f64 {
        if s <= self.delta * self.delta {
            1.0
        } else {
            self.delta / s.sqrt()
        }
    }

    pub fn is_active(&self, s: f64) -> bool {
        s > self.delta * self.delta
    }
}

pub fn huber(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        delta * (2.0 * s.sqrt() - delta)
    }
}

/// `δ = δ_rel · ‖w̄‖₁/2 · sqrt(Σ‖x2d_i − x̄2d‖² / (N−1))`.
pub fn adaptive_delta(set: &CorrespondenceSet, delta_rel: f64) -> Result<f64> {
    let n = set.points.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("adaptive threshold needs at least 2 points, got {n}")));
    }
    let nf = n as f64;
    let (mut w_mean, mut x_mean) = (nalgebra::Vector2::zeros(), nalgebra::Vector2::zeros());
    for p in &set.points {
        w_mean += p.w2d;
        x_mean += p.x2d;
    }
    w_mean /= nf;
    x_mean /= nf;
    let spread: f64 = set.points.iter().map(|p| (p.x2d - x_mean).norm_squared()).sum::<f64>() / (nf - 1.0);
    let delta = delta_rel * 0.5 * w_mean.lp_norm(1) * spread.sqrt();
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::DegenerateSet(format!(
            "Huber threshold is {delta} (zero weights or no 2D spread)"
        )));
    }
    Ok(delta)
}
