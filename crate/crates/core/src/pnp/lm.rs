use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{CorrespondenceSet, Pose};
use crate::pnp::kernel::{adaptive_delta, Huber};
use crate::pnp::system::{build_system_subset, RobustSystem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative Huber threshold.
    pub delta_rel: f64,
    /// Damping floor used by Gauss-Newton steps and the covariance.
    pub eps: f64,
    pub max_iter: usize,
    pub lambda_init: f64,
    /// Factor by which λ grows after a rejected step (doubles on repeats).
    pub tr_grow: f64,
    /// Largest factor by which λ shrinks after a good step.
    pub tr_shrink: f64,
    /// Number of random subsets for initialization.
    pub num_subsets: usize,
    pub subset_size: usize,
    /// LM iterations per subset hypothesis.
    pub init_iters: usize,
    pub step_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            delta_rel: 1.0,
            eps: 1e-5,
            max_iter: 10,
            lambda_init: 1e-4,
            tr_grow: 2.0,
            tr_shrink: 3.0,
            num_subsets: 64,
            subset_size: 4,
            init_iters: 3,
            step_tol: 1e-10,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.max_iter < 1 {
            return bad("max_iter must be at least 1");
        }
        if !(self.delta_rel > 0.0) || !(self.lambda_init > 0.0) {
            return bad("delta_rel and lambda_init must be positive");
        }
        if !(self.tr_grow > 1.0) || !(self.tr_shrink > 1.0) {
            return bad("trust-region factors must exceed 1");
        }
        if self.num_subsets < 1 {
            return bad("num_subsets must be at least 1");
        }
        if self.subset_size < 3 || self.subset_size >= n_points {
            return Err(Error::InvalidInput(format!(
                "subset size must satisfy 3 <= n < N (n={}, N={n_points})",
                self.subset_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub pose: Pose,
    /// Tangent-space covariance `(J̃ᵀJ̃ + εI)⁻¹` at the solution.
    pub covariance: DMatrix<f64>,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Robust cost after the initial evaluation and every accepted step.
    pub cost_history: Vec<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct IterOutcome {
    pub pose: Pose,
    pub system: RobustSystem,
    pub converged: bool,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
}

fn solve_damped(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b)).filter(|x| x.iter().all(|v| v.is_finite()))
}

/// Trust-region LM iterations on an optional subset of the points.
pub(crate) fn lm_iterate(
    set: &CorrespondenceSet,
    subset: Option<&[usize]>,
    init: Pose,
    huber: &Huber,
    opts: &SolverOptions,
    max_iter: usize,
) -> Result<IterOutcome> {
    const MIN_RELATIVE_DECREASE: f64 = 1e-3;
    const MAX_DAMPING_RETRIES: usize = 30;
    let mut pose = init;
    let mut sys = build_system_subset(set, subset, &pose, huber)?;
    let mut history = vec![sys.cost];
    let mut lambda = opts.lambda_init;
    let mut grow = opts.tr_grow;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let jtj = sys.normal_matrix();
        let g = sys.gradient();
        if g.amax() == 0.0 {
            converged = true;
            break;
        }
        let diag = jtj.diagonal().map(|v| v.clamp(1e-6, 1e32));
        let mut step = None;
        let mut lam = lambda;
        for _ in 0..MAX_DAMPING_RETRIES {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += lam * diag[k];
            }
            if let Some(s) = solve_damped(&a, &(-&g)) {
                step = Some(s);
                break;
            }
            lam *= 10.0;
        }
        lambda = lam;
        let step = step.ok_or(Error::SingularSystem)?;
        if step.norm() < opts.step_tol {
            converged = true;
            break;
        }
        let candidate = pose.retract(step.as_slice());
        let predicted = -(g.dot(&step) + 0.5 * step.dot(&(&jtj * &step)));
        let accepted = match build_system_subset(set, subset, &candidate, huber) {
            Ok(new_sys) if new_sys.invalid.len() <= sys.invalid.len() && new_sys.cost <= sys.cost => {
                let ratio = if predicted > 0.0 { (sys.cost - new_sys.cost) / predicted } else { 0.0 };
                if ratio > MIN_RELATIVE_DECREASE || new_sys.cost == 0.0 {
                    Some((new_sys, ratio))
                } else {
                    None
                }
            }
            _ => None,
        };
        match accepted {
            Some((new_sys, ratio)) => {
                let rel_change = (sys.cost - new_sys.cost) / sys.cost.max(f64::MIN_POSITIVE);
                pose = candidate;
                sys = new_sys;
                history.push(sys.cost);
                let t = 2.0 * ratio - 1.0;
                lambda *= (1.0 - t * t * t).max(1.0 / opts.tr_shrink);
                grow = opts.tr_grow;
                if sys.cost == 0.0 || rel_change < 1e-14 {
                    converged = true;
                    break;
                }
            }
            None => {
                lambda *= grow;
                grow *= opts.tr_grow;
            }
        }
    }
    Ok(IterOutcome { pose, system: sys, converged, iterations, cost_history: history })
}

/// Robustified Levenberg-Marquardt from `init`; δ is computed once from `set`.
pub fn lm_solve(set: &CorrespondenceSet, init: &Pose, opts: &SolverOptions) -> Result<SolveResult> {
    set.validate(&init.space())?;
    let delta = adaptive_delta(set, opts.delta_rel)?;
    lm_solve_with_delta(set, init, delta, opts)
}

pub fn lm_solve_with_delta(
    set: &CorrespondenceSet,
    init: &Pose,
    delta: f64,
    opts: &SolverOptions,
) -> Result<SolveResult> {
    let huber = Huber::new(delta);
    let out = lm_iterate(set, None, *init, &huber, opts, opts.max_iter)?;
    Ok(finish(out, opts.eps, delta))
}

fn finish(out: IterOutcome, eps: f64, delta: f64) -> SolveResult {
    let covariance = covariance_from_system(&out.system, eps);
    SolveResult {
        pose: out.pose,
        covariance,
        cost: out.system.cost,
        converged: out.converged,
        iterations: out.iterations,
        cost_history: out.cost_history,
        delta,
    }
}

/// Fast inference mode: undamped-by-trust-region Gauss-Newton steps
/// `Δy = −(J̃ᵀJ̃ + εI)⁻¹ J̃ᵀF̃`.
pub fn gn_solve(set: &CorrespondenceSet, init: &Pose, opts: &SolverOptions) -> Result<SolveResult> {
    set.validate(&init.space())?;
    let delta = adaptive_delta(set, opts.delta_rel)?;
    let huber = Huber::new(delta);
    let mut pose = *init;
    let mut sys = build_system_subset(set, None, &pose, &huber)?;
    let mut history = vec![sys.cost];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let step = gn_step(&sys, opts.eps)?;
        if step.norm() < opts.step_tol {
            converged = true;
            break;
        }
        let candidate = pose.retract(step.as_slice());
        match build_system_subset(set, None, &candidate, &huber) {
            Ok(s) => {
                pose = candidate;
                sys = s;
                history.push(sys.cost);
            }
            Err(Error::AllPointsInvalid) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(finish(IterOutcome { pose, system: sys, converged, iterations, cost_history: history }, opts.eps, delta))
}

pub fn gn_step(sys: &RobustSystem, eps: f64) -> Result<DVector<f64>> {
    let mut a = sys.normal_matrix();
    for k in 0..a.nrows() {
        a[(k, k)] += eps;
    }
    solve_damped(&a, &(-sys.gradient())).ok_or(Error::SingularSystem)
}

pub(crate) fn covariance_from_system(sys: &RobustSystem, eps: f64) -> DMatrix<f64> {
    let mut a = sys.normal_matrix();
    for k in 0..a.nrows() {
        a[(k, k)] += eps;
    }
    let inv = a
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| a.try_inverse())
        .unwrap_or_else(|| DMatrix::identity(sys.j.ncols(), sys.j.ncols()) / eps);
    (&inv + inv.transpose()) * 0.5
}

/// `Σ = (J̃ᵀJ̃ + εI)⁻¹` at `pose`, with δ from `set`.
pub fn covariance(set: &CorrespondenceSet, pose: &Pose, opts: &SolverOptions) -> Result<DMatrix<f64>> {
    let delta = adaptive_delta(set, opts.delta_rel)?;
    let sys = build_system_subset(set, None, pose, &Huber::new(delta))?;
    Ok(covariance_from_system(&sys, opts.eps))
}
