//! Deterministic trapezoid integration over yaw for yaw-only problems.

use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::amis::log_sum_exp;
use crate::error::{Error, Result};
use crate::geometry::{point_cost, CorrGrad, CorrespondenceSet, Pose};
use crate::likelihood::log_likelihood;
use crate::pnp::Huber;

/// Default number of grid points.
pub const DEFAULT_GRID: usize = 16384;

#[derive(Debug, Clone)]
pub struct YawGrid {
    pub t_fixed: Vector3<f64>,
    pub thetas: Vec<f64>,
    pub log_p: Vec<f64>,
    /// `log ∫ p(X|θ) dθ`.
    pub log_norm: f64,
}

impl YawGrid {
    pub fn step(&self) -> f64 {
        2.0 * PI / self.thetas.len() as f64
    }

    /// Normalized posterior mass per grid node.
    pub fn masses(&self) -> Vec<f64> {
        let h = self.step().ln();
        self.log_p.iter().map(|l| (l + h - self.log_norm).exp()).collect()
    }

    /// Posterior mean of `g`.
    pub fn expectation<F: Fn(f64) -> f64>(&self, g: F) -> f64 {
        self.thetas.iter().zip(self.masses()).filter(|(_, m)| *m > 0.0).map(|(t, m)| m * g(*t)).sum()
    }
}

/// Periodic trapezoid rule on `n` nodes over `[−π, π)`.
pub fn yaw_grid(set: &CorrespondenceSet, t_fixed: Vector3<f64>, huber: &Huber, n: usize) -> Result<YawGrid> {
    if n < 2 {
        return Err(Error::InvalidInput("quadrature needs at least 2 nodes".into()));
    }
    let h = 2.0 * PI / n as f64;
    let thetas: Vec<f64> = (0..n).map(|i| -PI + i as f64 * h).collect();
    let log_p: Vec<f64> = thetas.iter().map(|&th| log_likelihood(set, &Pose::yaw_only(th, t_fixed), huber)).collect();
    let lse = log_sum_exp(log_p.iter().copied());
    if lse == f64::NEG_INFINITY {
        return Err(Error::AllWeightsZero);
    }
    Ok(YawGrid { t_fixed, thetas, log_p, log_norm: lse + h.ln() })
}

/// KL loss and its correspondence gradients with the log normalizer computed
/// by quadrature instead of sampling.
#[derive(Debug, Clone)]
pub struct QuadratureLoss {
    pub l_tgt: f64,
    pub l_pred: f64,
    pub l_kl: f64,
    pub grads: Vec<CorrGrad>,
}

fn point_grads(set: &CorrespondenceSet, pose: &Pose, huber: &Huber) -> Vec<CorrGrad> {
    set.points
        .iter()
        .map(|c| point_cost(pose, c, &set.camera, huber).map(|pc| pc.grad).unwrap_or_else(|_| CorrGrad::zeros()))
        .collect()
}

pub fn quadrature_loss(set: &CorrespondenceSet, y_gt: &Pose, huber: &Huber, n: usize) -> Result<QuadratureLoss> {
    let Pose::YawOnly { t_fixed, .. } = *y_gt else {
        return Err(Error::SpaceMismatch("quadrature covers yaw-only problems".into()));
    };
    let l_tgt = -log_likelihood(set, y_gt, huber);
    if !l_tgt.is_finite() {
        return Err(Error::DegenerateSet("target pose puts a weighted point behind the camera".into()));
    }
    let grid = yaw_grid(set, t_fixed, huber, n)?;
    let mut grads = point_grads(set, y_gt, huber);
    for (th, m) in grid.thetas.iter().zip(grid.masses()) {
        if m == 0.0 {
            continue;
        }
        for (g, s) in grads.iter_mut().zip(point_grads(set, &Pose::yaw_only(*th, t_fixed), huber)) {
            g.add_scaled(&s, -m);
        }
    }
    let l_pred = grid.log_norm;
    Ok(QuadratureLoss { l_tgt, l_pred, l_kl: l_tgt + l_pred, grads })
}
