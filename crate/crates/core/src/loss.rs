//! KL pose loss `L = ½Σρ(‖f_i(y_gt)‖²) + log ∫ exp(−½Σρ(‖f_i(y)‖²)) dy`
//! with analytic gradients w.r.t. every correspondence parameter, the
//! Gauss-Newton derivative regularizer, and the softmax weight head.

use nalgebra::{DMatrix, DVector, Quaternion, UnitQuaternion, Vector2, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::amis::{amis, McBatch, McConfig};
use crate::distributions::ProposalConfig;
use crate::error::{Error, Result};
use crate::geometry::{point_cost, wrap_angle, CorrGrad, CorrespondenceSet, Pose};
use crate::likelihood::robust_cost;
use crate::par;
use crate::pnp::init::solve_guarded_with_delta;
use crate::pnp::system::{build_system, point_block, POINT_PARAMS};
use crate::pnp::{adaptive_delta, gn_step, Huber, SolveResult, SolverOptions};

#[derive(Debug, Clone)]
pub struct LossReport {
    pub l_tgt: f64,
    pub l_pred: f64,
    /// Exactly `l_tgt + l_pred`.
    pub l_kl: f64,
    /// `∂L/∂X` per point.
    pub grads: Vec<CorrGrad>,
    pub l_reg: Option<f64>,
    pub solve: SolveResult,
    pub batch: McBatch,
    pub delta: f64,
}

fn ensure_weighted(set: &CorrespondenceSet) -> Result<()> {
    if set.points.iter().all(|p| p.w2d == Vector2::zeros()) {
        return Err(Error::DegenerateSet("all weights are zero; the pose integral is unbounded".into()));
    }
    Ok(())
}

/// Per-point cost gradients at `pose`; points behind the camera contribute zero.
pub fn cost_gradients(set: &CorrespondenceSet, pose: &Pose, huber: &Huber) -> Vec<CorrGrad> {
    set.points
        .iter()
        .map(|c| point_cost(pose, c, &set.camera, huber).map(|pc| pc.grad).unwrap_or_else(|_| CorrGrad::zeros()))
        .collect()
}

/// Importance-weighted mean of the per-point cost gradients over the batch.
pub fn expected_gradients(set: &CorrespondenceSet, batch: &McBatch, huber: &Huber, exec: par::Exec) -> Result<Vec<CorrGrad>> {
    let w = batch.normalized_weights()?;
    let active: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0).collect();
    let parts = par::map(exec, &active, |&j| {
        let mut g = cost_gradients(set, &batch.samples[j].pose, huber);
        for gi in &mut g {
            *gi = gi.scaled(w[j]);
        }
        g
    });
    let mut acc = vec![CorrGrad::zeros(); set.len()];
    for g in parts {
        for (a, gi) in acc.iter_mut().zip(&g) {
            a.add_scaled(gi, 1.0);
        }
    }
    Ok(acc)
}

/// Monte Carlo KL loss. The solver runs in ground-truth-guarded mode; AMIS
/// starts from its Laplace approximation and the same batch serves both the
/// estimate of `l_pred` and the expectation in the gradient. δ is treated as
/// a constant.
pub fn kl_loss(set: &CorrespondenceSet, y_gt: &Pose, cfg: &McConfig, opts: &SolverOptions) -> Result<LossReport> {
    ensure_weighted(set)?;
    set.validate(&y_gt.space())?;
    opts.validate(set.len())?;
    let delta = adaptive_delta(set, opts.delta_rel)?;
    let huber = Huber::new(delta);
    let l_tgt = robust_cost(set, y_gt, &huber);
    if !l_tgt.is_finite() {
        return Err(Error::DegenerateSet("target pose puts a weighted point behind the camera".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let solve = solve_guarded_with_delta(set, y_gt, delta, opts, &mut rng)?;
    let batch = amis(set, &solve, cfg, &ProposalConfig::default())?;
    let expected = expected_gradients(set, &batch, &huber, cfg.exec)?;
    let grads: Vec<CorrGrad> = cost_gradients(set, y_gt, &huber).iter().zip(&expected).map(|(a, b)| a.sub(b)).collect();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step: i });
    }
    let l_pred = batch.l_pred;
    Ok(LossReport { l_tgt, l_pred, l_kl: l_tgt + l_pred, grads, l_reg: None, solve, batch, delta })
}

/// The two terms of `−∂L/∂w`: the uncertainty term `−∂c/∂w` at the target
/// pose and the discrimination term `E[∂c/∂w]` over the pose posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGradients {
    pub uncertainty: Vec<Vector2<f64>>,
    pub discrimination: Vec<Vector2<f64>>,
}

impl WeightGradients {
    /// `−∂L/∂w = uncertainty + discrimination`.
    pub fn negative_total(&self) -> Vec<Vector2<f64>> {
        self.uncertainty.iter().zip(&self.discrimination).map(|(u, d)| u + d).collect()
    }

    /// `∂L/∂w`.
    pub fn total(&self) -> Vec<Vector2<f64>> {
        self.uncertainty.iter().zip(&self.discrimination).map(|(u, d)| -(u + d)).collect()
    }
}

pub fn grad_weights(set: &CorrespondenceSet, y_gt: &Pose, batch: &McBatch, huber: &Huber) -> Result<WeightGradients> {
    let uncertainty = cost_gradients(set, y_gt, huber).iter().map(|g| -g.w2d).collect();
    let discrimination = expected_gradients(set, batch, huber, par::Exec::Sequential)?.iter().map(|g| g.w2d).collect();
    Ok(WeightGradients { uncertainty, discrimination })
}

// ---------------------------------------------------------------------------
// derivative regularization

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegConfig {
    /// Smooth-L1 threshold on the position distance, meters.
    pub beta: f64,
    pub position_weight: f64,
    pub orientation_weight: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self { beta: 0.1, position_weight: 1.0, orientation_weight: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct RegReport {
    pub l_reg: f64,
    pub l_pos: f64,
    pub l_orient: f64,
    /// Gauss-Newton step `Δy` at `y*`.
    pub step: DVector<f64>,
    pub grads: Vec<CorrGrad>,
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta }
}

/// `½(Δω, 0) ⊗ l`, the first-order change of `l` under a left rotation.
fn quaternion_increment(dw: &Vector3<f64>, q: &UnitQuaternion<f64>) -> Vector4<f64> {
    (Quaternion::from_imag(*dw) * q.into_inner()).coords * 0.5
}

/// Loss of the pose `y* ⊕ Δy` against `y_gt`, and its gradient w.r.t. `Δy`.
fn step_loss(y_star: &Pose, step: &DVector<f64>, y_gt: &Pose, cfg: &RegConfig) -> Result<(f64, f64, DVector<f64>)> {
    let d = step.len();
    let mut grad = DVector::zeros(d);
    let pos = |t_star: Vector3<f64>, t_gt: Vector3<f64>, grad: &mut DVector<f64>| {
        let e = t_star + Vector3::new(step[0], step[1], step[2]) - t_gt;
        let n = e.norm();
        let g = if n < cfg.beta { e / cfg.beta } else if n > 0.0 { e / n } else { Vector3::zeros() };
        grad.fixed_rows_mut::<3>(0).copy_from(&(g * cfg.position_weight));
        smooth_l1(n, cfg.beta)
    };
    let yaw = |th_star: f64, th_gt: f64, k: usize, grad: &mut DVector<f64>| {
        let a = wrap_angle(th_star + step[k] - th_gt);
        grad[k] = cfg.orientation_weight * a.sin();
        1.0 - a.cos()
    };
    let (l_pos, l_orient) = match (y_star, y_gt) {
        (Pose::YawOnly { theta: a, .. }, Pose::YawOnly { theta: b, .. }) => (0.0, yaw(*a, *b, 0, &mut grad)),
        (Pose::Yaw4DoF { t: ta, theta: a }, Pose::Yaw4DoF { t: tb, theta: b }) => {
            (pos(*ta, *tb, &mut grad), yaw(*a, *b, 3, &mut grad))
        }
        (Pose::Quat6DoF { t: ta, q: qa }, Pose::Quat6DoF { t: tb, q: qb }) => {
            let lp = pos(*ta, *tb, &mut grad);
            let dw = Vector3::new(step[3], step[4], step[5]);
            let l = qa.coords + quaternion_increment(&dw, qa);
            let c = l.dot(&qb.coords);
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = 1.0;
                grad[3 + k] = cfg.orientation_weight * (-4.0 * c * quaternion_increment(&e, qa).dot(&qb.coords));
            }
            (lp, 2.0 - 2.0 * c * c)
        }
        _ => return Err(Error::SpaceMismatch("solution and target live in different pose spaces".into())),
    };
    Ok((cfg.position_weight * l_pos, cfg.orientation_weight * l_orient, grad))
}

/// `L_reg = l(y* ⊕ Δy, y_gt)` with `Δy` the Gauss-Newton step at the
/// detached solution `y*`. Gradients flow through `Δy` only, with δ fixed.
pub fn reg_loss(
    set: &CorrespondenceSet,
    y_star: &Pose,
    y_gt: &Pose,
    huber: &Huber,
    eps: f64,
    cfg: &RegConfig,
) -> Result<RegReport> {
    let sys = build_system(set, y_star, huber)?;
    let step = gn_step(&sys, eps)?;
    let (l_pos, l_orient, u) = step_loss(y_star, &step, y_gt, cfg)?;
    let d = step.len();
    let mut a: DMatrix<f64> = sys.normal_matrix();
    for k in 0..d {
        a[(k, k)] += eps;
    }
    let chol = a.cholesky().ok_or(Error::SingularSystem)?;
    let z = chol.solve(&u);
    let s = -&step;
    let mut grads = vec![CorrGrad::zeros(); set.len()];
    for (i, c) in set.points.iter().enumerate() {
        if sys.invalid.contains(&i) {
            continue;
        }
        let blk = point_block(y_star, c, &set.camera, huber)?;
        let jz = &blk.j * &z;
        let js = &blk.j * &s;
        let mut out = [0.0; POINT_PARAMS];
        for k in 0..POINT_PARAMS {
            let dj = &blk.dj[k];
            // dg = dJᵀf + Jᵀdf ; zᵀdA s = (dJ z)·(J s) + (J z)·(dJ s)
            let dg_z = (dj * &z).dot(&DVector::from_column_slice(blk.f.as_slice()))
                + jz.dot(&DVector::from_column_slice(blk.df[k].as_slice()));
            let da = (dj * &z).dot(&js) + jz.dot(&(dj * &s));
            out[k] = -dg_z + da;
        }
        grads[i] = CorrGrad::from_array(&out);
    }
    Ok(RegReport { l_reg: l_pos + l_orient, l_pos, l_orient, step, grads })
}

/// KL loss plus the derivative regularizer evaluated at the loss's own
/// detached solution, scaled by `reg_weight`.
pub fn kl_loss_with_reg(
    set: &CorrespondenceSet,
    y_gt: &Pose,
    cfg: &McConfig,
    opts: &SolverOptions,
    reg: &RegConfig,
    reg_weight: f64,
) -> Result<LossReport> {
    let mut report = kl_loss(set, y_gt, cfg, opts)?;
    let r = reg_loss(set, &report.solve.pose, y_gt, &Huber::new(report.delta), opts.eps, reg)?;
    for (g, gr) in report.grads.iter_mut().zip(&r.grads) {
        g.add_scaled(gr, reg_weight);
    }
    report.l_reg = Some(r.l_reg);
    Ok(report)
}

// ---------------------------------------------------------------------------
// weight head

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Spatial softmax over points, per channel.
    Softmax,
    /// Plain exponential with no normalizing denominator.
    Exp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightHead {
    pub logits: Vec<[f64; 2]>,
    pub log_scale: [f64; 2],
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightHeadGrad {
    pub logits: Vec<[f64; 2]>,
    pub log_scale: [f64; 2],
}

impl WeightHead {
    pub fn new(n: usize, log_scale: [f64; 2], activation: Activation) -> Self {
        Self { logits: vec![[0.0; 2]; n], log_scale, activation }
    }

    /// Per-channel normalized weights before the global scale.
    fn unit_weights(&self) -> Vec<[f64; 2]> {
        let mut out = vec![[0.0; 2]; self.logits.len()];
        for c in 0..2 {
            match self.activation {
                Activation::Softmax => {
                    let m = self.logits.iter().map(|l| l[c]).fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = self.logits.iter().map(|l| (l[c] - m).exp()).sum();
                    for (o, l) in out.iter_mut().zip(&self.logits) {
                        o[c] = (l[c] - m).exp() / s;
                    }
                }
                Activation::Exp => {
                    for (o, l) in out.iter_mut().zip(&self.logits) {
                        o[c] = l[c].exp();
                    }
                }
            }
        }
        out
    }

    pub fn weights(&self) -> Vec<Vector2<f64>> {
        let scale = [self.log_scale[0].exp(), self.log_scale[1].exp()];
        self.unit_weights().iter().map(|p| Vector2::new(scale[0] * p[0], scale[1] * p[1])).collect()
    }

    /// Chain rule from `∂L/∂w` to the head parameters.
    pub fn backward(&self, dw: &[Vector2<f64>]) -> WeightHeadGrad {
        let p = self.unit_weights();
        let w = self.weights();
        let mut logits = vec![[0.0; 2]; p.len()];
        let mut log_scale = [0.0; 2];
        for c in 0..2 {
            let gw: f64 = dw.iter().zip(&w).map(|(g, wi)| g[c] * wi[c]).sum();
            log_scale[c] = gw;
            match self.activation {
                Activation::Softmax => {
                    for i in 0..p.len() {
                        logits[i][c] = w[i][c] * dw[i][c] - p[i][c] * gw;
                    }
                }
                Activation::Exp => {
                    for i in 0..p.len() {
                        logits[i][c] = w[i][c] * dw[i][c];
                    }
                }
            }
        }
        WeightHeadGrad { logits, log_scale }
    }
}

pub fn weight_head(head: &WeightHead) -> Vec<Vector2<f64>> {
    head.weights()
}
