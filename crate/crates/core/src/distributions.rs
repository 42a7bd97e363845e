//! Decoupled proposal distributions over pose: a multivariate t for
//! translation, a von Mises + uniform mixture for yaw, and an angular
//! central Gaussian for unit quaternions.

use std::f64::consts::PI;

use nalgebra::{Cholesky, Matrix3, Matrix4, UnitQuaternion, Vector3, Vector4, U3, U4};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose, PoseSpace};
use crate::pnp::SolveResult;

/// Degrees of freedom of the translation proposal.
pub const STUDENT_T_DOF: f64 = 3.0;
/// Weight of the uniform component in the yaw proposal.
pub const UNIFORM_MIX_WEIGHT: f64 = 0.25;
/// Dispersion added to fitted ACG parameters.
pub const ACG_DISPERSION: f64 = 0.001;
/// Upper bound on the von Mises concentration.
pub const KAPPA_CAP: f64 = 1e6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Effective sample size `(Σw)² / Σw²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let (s1, s2) = weights.iter().fold((0.0, 0.0), |(a, b), w| (a + w, b + w * w));
    if s2 > 0.0 { s1 * s1 / s2 } else { 0.0 }
}

fn check_weights(n: usize, weights: &[f64]) -> Result<f64> {
    if n != weights.len() {
        return Err(Error::InvalidInput(format!("{n} samples but {} weights", weights.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InsufficientSamples { effective: 0.0, required: 1.0 });
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// multivariate t

#[derive(Debug, Clone, PartialEq)]
pub struct MvtParams {
    pub mu: Vector3<f64>,
    pub sigma: Matrix3<f64>,
    pub nu: f64,
    chol: Matrix3<f64>,
    log_norm: f64,
}

impl MvtParams {
    pub fn new(mu: Vector3<f64>, sigma: Matrix3<f64>, nu: f64) -> Result<Self> {
        if !(nu > 1.0) || !nu.is_finite() {
            return Err(Error::InvalidInput(format!("t degrees of freedom must exceed 1, got {nu}")));
        }
        let sym = (sigma + sigma.transpose()) * 0.5;
        let chol = Cholesky::<f64, U3>::new(sym)
            .ok_or(Error::RankDeficientFit { location: mu })?
            .l();
        let log_det = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_norm = ln_gamma(0.5 * (nu + 3.0)) - ln_gamma(0.5 * nu) - 1.5 * (nu * PI).ln() - 0.5 * log_det;
        Ok(Self { mu, sigma: sym, nu, chol, log_norm })
    }

    /// `(t−μ)ᵀ Σ⁻¹ (t−μ)`.
    pub fn mahalanobis_sq(&self, t: &Vector3<f64>) -> f64 {
        let z = self.chol.solve_lower_triangular(&(t - self.mu)).expect("cholesky factor is invertible");
        z.norm_squared()
    }

    pub fn log_pdf(&self, t: &Vector3<f64>) -> f64 {
        self.log_norm - 0.5 * (self.nu + 3.0) * (1.0 + self.mahalanobis_sq(t) / self.nu).ln_1p_safe()
    }

    pub fn pdf(&self, t: &Vector3<f64>) -> f64 {
        self.log_pdf(t).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Vec<Vector3<f64>> {
        let chi = ChiSquared::new(self.nu).expect("nu > 1");
        (0..k)
            .map(|_| {
                let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                let u: f64 = chi.sample(rng);
                self.mu + self.chol * z * (self.nu / u).sqrt()
            })
            .collect()
    }

    /// Covariance of the distribution, `ν/(ν−2) Σ` (infinite for ν ≤ 2).
    pub fn covariance(&self) -> Option<Matrix3<f64>> {
        (self.nu > 2.0).then(|| self.sigma * (self.nu / (self.nu - 2.0)))
    }
}

trait Ln1pSafe {
    fn ln_1p_safe(self) -> f64;
}

impl Ln1pSafe for f64 {
    /// `ln(x)` for `x = 1 + m/ν`, computed as `ln_1p(m/ν)`.
    fn ln_1p_safe(self) -> f64 {
        (self - 1.0).ln_1p()
    }
}

pub fn mvt_pdf(p: &MvtParams, t: &Vector3<f64>) -> f64 {
    p.pdf(t)
}

pub fn mvt_sample<R: Rng + ?Sized>(p: &MvtParams, rng: &mut R, k: usize) -> Vec<Vector3<f64>> {
    p.sample(rng, k)
}

/// Weighted mean and reliability-weighted covariance (equal weights give the
/// ordinary `1/(n−1)` sample covariance), with `ν` fixed.
pub fn mvt_fit(samples: &[Vector3<f64>], weights: &[f64], nu: f64) -> Result<MvtParams> {
    let total = check_weights(samples.len(), weights)?;
    let mean = samples.iter().zip(weights).fold(Vector3::zeros(), |acc, (x, w)| acc + x * *w) / total;
    let v2: f64 = weights.iter().map(|w| w * w).sum();
    let ess = total * total / v2;
    if ess < 4.0 {
        return Err(Error::RankDeficientFit { location: mean });
    }
    let mut cov = Matrix3::zeros();
    for (x, w) in samples.iter().zip(weights) {
        let d = x - mean;
        cov += d * d.transpose() * *w;
    }
    cov /= total - v2 / total;
    MvtParams::new(mean, cov, nu).map_err(|_| Error::RankDeficientFit { location: mean })
}

// ---------------------------------------------------------------------------
// von Mises + uniform

/// `ln(I₀(κ) e^{−κ})`.
pub fn log_bessel_i0_scaled(kappa: f64) -> f64 {
    let k = kappa.abs();
    if k < 20.0 {
        // power series Σ (κ²/4)^j / (j!)²
        let q = 0.25 * k * k;
        let (mut term, mut sum, mut j) = (1.0f64, 1.0f64, 0.0f64);
        loop {
            j += 1.0;
            term *= q / (j * j);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        sum.ln() - k
    } else {
        // asymptotic series e^κ/√(2πκ) Σ ((2j−1)!!)² / (j! (8κ)^j)
        let (mut term, mut sum, mut j) = (1.0f64, 1.0f64, 0.0f64);
        loop {
            let next = term * (2.0 * j + 1.0).powi(2) / ((j + 1.0) * 8.0 * k);
            if next >= term || next < sum * 1e-17 {
                if next < term {
                    sum += next;
                }
                break;
            }
            term = next;
            sum += term;
            j += 1.0;
        }
        sum.ln() - 0.5 * (2.0 * PI * k).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmuParams {
    pub mu: f64,
    pub kappa: f64,
    pub alpha: f64,
}

impl VmuParams {
    pub fn new(mu: f64, kappa: f64, alpha: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !(0.0..=1.0).contains(&alpha) || !mu.is_finite() {
            return Err(Error::InvalidInput(format!(
                "von Mises mixture needs κ ≥ 0 and α ∈ [0,1] (κ={kappa}, α={alpha})"
            )));
        }
        Ok(Self { mu: wrap_angle(mu), kappa: kappa.min(KAPPA_CAP), alpha })
    }

    pub fn log_pdf(&self, theta: f64) -> f64 {
        let vm = if self.alpha < 1.0 {
            (1.0 - self.alpha).ln() + self.kappa * ((theta - self.mu).cos() - 1.0) - log_bessel_i0_scaled(self.kappa)
        } else {
            f64::NEG_INFINITY
        };
        let uni = if self.alpha > 0.0 { self.alpha.ln() } else { f64::NEG_INFINITY };
        let m = vm.max(uni);
        m + ((vm - m).exp() + (uni - m).exp()).ln() - LN_2PI
    }

    pub fn pdf(&self, theta: f64) -> f64 {
        self.log_pdf(theta).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Vec<f64> {
        (0..k)
            .map(|_| {
                if rng.random::<f64>() < self.alpha {
                    rng.random_range(-PI..PI)
                } else {
                    sample_von_mises(self.mu, self.kappa, rng)
                }
            })
            .collect()
    }
}

/// Best-Fisher rejection sampler; normal approximation for very large κ.
pub fn sample_von_mises<R: Rng + ?Sized>(mu: f64, kappa: f64, rng: &mut R) -> f64 {
    if kappa < 1e-8 {
        return rng.random_range(-PI..PI);
    }
    if kappa > 1e5 {
        let z: f64 = StandardNormal.sample(rng);
        return wrap_angle(mu + z / kappa.sqrt());
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            let dev = f.clamp(-1.0, 1.0).acos();
            return wrap_angle(if u3 > 0.5 { mu + dev } else { mu - dev });
        }
    }
}

pub fn vmu_pdf(p: &VmuParams, theta: f64) -> f64 {
    p.pdf(theta)
}

pub fn vmu_sample<R: Rng + ?Sized>(p: &VmuParams, rng: &mut R, k: usize) -> Vec<f64> {
    p.sample(rng, k)
}

/// Weighted circular mean and mean resultant length `r̄`.
pub fn circular_mean(samples: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    let total = check_weights(samples.len(), weights)?;
    let (s, c) = samples
        .iter()
        .zip(weights)
        .fold((0.0, 0.0), |(s, c), (th, w)| (s + w * th.sin(), c + w * th.cos()));
    let (s, c) = (s / total, c / total);
    Ok((s.atan2(c), (s * s + c * c).sqrt().min(1.0)))
}

/// Approximate concentration `r̄(2−r̄²)/(1−r̄²)`, capped.
pub fn kappa_estimate(r_bar: f64) -> f64 {
    if r_bar >= 1.0 {
        return KAPPA_CAP;
    }
    (r_bar * (2.0 - r_bar * r_bar) / (1.0 - r_bar * r_bar)).min(KAPPA_CAP)
}

/// Circular mean for μ, a third of the approximate κ, fixed mixture weight.
pub fn vmu_fit(samples: &[f64], weights: &[f64], alpha: f64) -> Result<VmuParams> {
    let (mu, r_bar) = circular_mean(samples, weights)?;
    VmuParams::new(mu, kappa_estimate(r_bar) / 3.0, alpha)
}

// ---------------------------------------------------------------------------
// angular central Gaussian

/// Surface area of the unit 3-sphere in R⁴.
pub const S4: f64 = 2.0 * PI * PI;

#[derive(Debug, Clone, PartialEq)]
pub struct AcgParams {
    pub lambda: Matrix4<f64>,
    chol: Matrix4<f64>,
    log_norm: f64,
}

impl AcgParams {
    pub fn new(lambda: Matrix4<f64>) -> Result<Self> {
        let sym = (lambda + lambda.transpose()) * 0.5;
        let chol = Cholesky::<f64, U4>::new(sym)
            .ok_or_else(|| Error::InvalidInput("ACG matrix must be symmetric positive definite".into()))?
            .l();
        let log_det = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { lambda: sym, chol, log_norm: -S4.ln() - 0.5 * log_det })
    }

    pub fn quadratic(&self, l: &Vector4<f64>) -> f64 {
        self.chol.solve_lower_triangular(l).expect("cholesky factor is invertible").norm_squared()
    }

    pub fn log_pdf(&self, l: &Vector4<f64>) -> f64 {
        self.log_norm - 2.0 * self.quadratic(l).ln()
    }

    pub fn pdf(&self, l: &Vector4<f64>) -> f64 {
        self.log_pdf(l).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Vec<Vector4<f64>> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let z = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
            let x = self.chol * z;
            let n = x.norm();
            if n > 0.0 {
                out.push(x / n);
            }
        }
        out
    }
}

pub fn acg_pdf(p: &AcgParams, l: &Vector4<f64>) -> f64 {
    p.pdf(l)
}

pub fn acg_sample<R: Rng + ?Sized>(p: &AcgParams, rng: &mut R, k: usize) -> Vec<Vector4<f64>> {
    p.sample(rng, k)
}

/// `Λ + α|Λ|^{1/4} I`.
pub fn acg_disperse(lambda: &Matrix4<f64>, alpha: f64) -> Matrix4<f64> {
    lambda + Matrix4::identity() * (alpha * lambda.determinant().max(0.0).powf(0.25))
}

/// Result of the weighted fixed-point iteration before dispersion.
#[derive(Debug, Clone, PartialEq)]
pub struct AcgFixedPoint {
    /// Trace-normalized (trace 4) solution.
    pub lambda: Matrix4<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub last_change: f64,
}

const ACG_TOL: f64 = 1e-8;
const ACG_MAX_ITER: usize = 100;
const ACG_ACCEPT: f64 = 1e-4;

fn acg_update(samples: &[Vector4<f64>], weights: &[f64], total: f64, lambda: &Matrix4<f64>) -> Option<Matrix4<f64>> {
    let chol = Cholesky::<f64, U4>::new(*lambda)?;
    let mut m = Matrix4::zeros();
    for (l, w) in samples.iter().zip(weights) {
        if *w == 0.0 {
            continue;
        }
        let q = l.dot(&chol.solve(l));
        if !(q > 0.0) {
            return None;
        }
        m += l * l.transpose() * (*w / q);
    }
    Some(m * (4.0 / total))
}

/// Solves `Λ = (4/Σv) Σ v l lᵀ / (lᵀΛ⁻¹l)` by fixed-point iteration,
/// renormalizing `tr Λ = 4` every iterate.
pub fn acg_fixed_point(samples: &[Vector4<f64>], weights: &[f64]) -> Result<AcgFixedPoint> {
    let total = check_weights(samples.len(), weights)?;
    let ess = effective_sample_size(weights);
    if ess < 5.0 {
        return Err(Error::InsufficientSamples { effective: ess, required: 5.0 });
    }
    let mut lambda = Matrix4::identity();
    let mut change = f64::INFINITY;
    for it in 1..=ACG_MAX_ITER {
        let next = acg_update(samples, weights, total, &lambda).ok_or(Error::FitDiverged { iterations: it })?;
        let tr = next.trace();
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::FitDiverged { iterations: it });
        }
        let next = next * (4.0 / tr);
        change = (next - lambda).norm();
        lambda = next;
        if change < ACG_TOL {
            return Ok(AcgFixedPoint { lambda, iterations: it, converged: true, last_change: change });
        }
    }
    if change < ACG_ACCEPT {
        Ok(AcgFixedPoint { lambda, iterations: ACG_MAX_ITER, converged: false, last_change: change })
    } else {
        Err(Error::FitDiverged { iterations: ACG_MAX_ITER })
    }
}

/// Residual of the stationarity equation at `lambda` (Frobenius norm).
pub fn acg_stationarity_residual(samples: &[Vector4<f64>], weights: &[f64], lambda: &Matrix4<f64>) -> f64 {
    let total: f64 = weights.iter().sum();
    match acg_update(samples, weights, total, lambda) {
        Some(m) => (m - lambda).norm(),
        None => f64::INFINITY,
    }
}

/// Weighted ACG fit followed by dispersion with `alpha_disp`.
pub fn acg_fit(samples: &[Vector4<f64>], weights: &[f64], alpha_disp: f64) -> Result<AcgParams> {
    let fp = acg_fixed_point(samples, weights)?;
    AcgParams::new(acg_disperse(&fp.lambda, alpha_disp)).map_err(|_| Error::FitDiverged { iterations: fp.iterations })
}

// ---------------------------------------------------------------------------
// pose proposals

#[derive(Debug, Clone, PartialEq)]
pub enum PositionProposal {
    /// Translation is not sampled (yaw-only problems).
    Fixed(Vector3<f64>),
    StudentT(MvtParams),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OrientationProposal {
    VonMises(VmuParams),
    Acg(AcgParams),
}

/// Product density `q(y) = q_position(t) · q_orientation(R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub position: PositionProposal,
    pub orientation: OrientationProposal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub nu: f64,
    pub uniform_weight: f64,
    pub acg_dispersion: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { nu: STUDENT_T_DOF, uniform_weight: UNIFORM_MIX_WEIGHT, acg_dispersion: ACG_DISPERSION }
    }
}

impl Proposal {
    pub fn new(position: PositionProposal, orientation: OrientationProposal) -> Result<Self> {
        match (&position, &orientation) {
            (_, OrientationProposal::VonMises(_)) => {}
            (PositionProposal::StudentT(_), OrientationProposal::Acg(_)) => {}
            _ => return Err(Error::SpaceMismatch("quaternion proposals need a sampled translation".into())),
        }
        Ok(Self { position, orientation })
    }

    pub fn space(&self) -> PoseSpace {
        match (&self.position, &self.orientation) {
            (PositionProposal::Fixed(t), _) => PoseSpace::YawOnly { t_fixed: *t },
            (_, OrientationProposal::VonMises(_)) => PoseSpace::Yaw4DoF,
            (_, OrientationProposal::Acg(_)) => PoseSpace::Quat6DoF,
        }
    }

    pub fn log_pdf(&self, pose: &Pose) -> f64 {
        let lp_pos = match &self.position {
            PositionProposal::Fixed(_) => 0.0,
            PositionProposal::StudentT(p) => p.log_pdf(&pose.translation()),
        };
        let lp_rot = match (&self.orientation, pose) {
            (OrientationProposal::VonMises(v), Pose::YawOnly { theta, .. } | Pose::Yaw4DoF { theta, .. }) => {
                v.log_pdf(*theta)
            }
            (OrientationProposal::Acg(a), Pose::Quat6DoF { q, .. }) => a.log_pdf(&q.coords),
            _ => panic!("pose space does not match the proposal"),
        };
        lp_pos + lp_rot
    }

    /// Draws translations first, then orientations, each independently.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Vec<Pose> {
        let positions = match &self.position {
            PositionProposal::Fixed(t) => vec![*t; k],
            PositionProposal::StudentT(p) => p.sample(rng, k),
        };
        match &self.orientation {
            OrientationProposal::VonMises(v) => {
                let thetas = v.sample(rng, k);
                positions
                    .into_iter()
                    .zip(thetas)
                    .map(|(t, th)| match self.position {
                        PositionProposal::Fixed(_) => Pose::yaw_only(th, t),
                        PositionProposal::StudentT(_) => Pose::yaw4(t, th),
                    })
                    .collect()
            }
            OrientationProposal::Acg(a) => {
                let ls = a.sample(rng, k);
                positions
                    .into_iter()
                    .zip(ls)
                    .map(|(t, l)| Pose::Quat6DoF { t, q: UnitQuaternion::new_unchecked(nalgebra::Quaternion::from(l)) })
                    .collect()
            }
        }
    }

    /// Refits each component from weighted poses. A component whose fit fails
    /// keeps its previous parameters; the second value counts such fallbacks.
    pub fn refit(&self, poses: &[Pose], weights: &[f64], cfg: &ProposalConfig) -> (Proposal, usize) {
        let mut fallbacks = 0;
        let position = match &self.position {
            PositionProposal::Fixed(t) => PositionProposal::Fixed(*t),
            PositionProposal::StudentT(prev) => {
                let ts: Vec<_> = poses.iter().map(|p| p.translation()).collect();
                match mvt_fit(&ts, weights, cfg.nu) {
                    Ok(p) => PositionProposal::StudentT(p),
                    Err(_) => {
                        fallbacks += 1;
                        PositionProposal::StudentT(prev.clone())
                    }
                }
            }
        };
        let orientation = match &self.orientation {
            OrientationProposal::VonMises(prev) => {
                let th: Vec<_> = poses.iter().map(|p| p.yaw().expect("yaw pose")).collect();
                match vmu_fit(&th, weights, cfg.uniform_weight) {
                    Ok(v) => OrientationProposal::VonMises(v),
                    Err(_) => {
                        fallbacks += 1;
                        OrientationProposal::VonMises(*prev)
                    }
                }
            }
            OrientationProposal::Acg(prev) => {
                let ls: Vec<_> = poses.iter().map(|p| p.quaternion_vector().expect("quaternion pose")).collect();
                match acg_fit(&ls, weights, cfg.acg_dispersion) {
                    Ok(a) => OrientationProposal::Acg(a),
                    Err(_) => {
                        fallbacks += 1;
                        OrientationProposal::Acg(prev.clone())
                    }
                }
            }
        };
        (Proposal { position, orientation }, fallbacks)
    }
}

/// 3×4 map from a quaternion perturbation `δq` to the left tangent
/// coordinates `ω = 2 vec(δq ⊗ q*)`.
pub fn quaternion_to_tangent(q: &UnitQuaternion<f64>) -> nalgebra::Matrix3x4<f64> {
    let conj = q.conjugate().into_inner();
    let mut m = nalgebra::Matrix3x4::zeros();
    for k in 0..4 {
        let mut e = Vector4::zeros();
        e[k] = 1.0;
        let p = nalgebra::Quaternion::from(e) * conj;
        m.set_column(k, &(p.imag() * 2.0));
    }
    m
}

/// Initial proposal from a solver result (Laplace approximation).
pub fn init_proposal(result: &SolveResult, cfg: &ProposalConfig) -> Result<Proposal> {
    let cov = &result.covariance;
    let pose = &result.pose;
    if cov.nrows() != pose.dof() || cov.ncols() != pose.dof() {
        return Err(Error::SpaceMismatch(format!(
            "covariance is {}×{} for a {}-DoF pose",
            cov.nrows(),
            cov.ncols(),
            pose.dof()
        )));
    }
    let student = |t: Vector3<f64>| -> Result<PositionProposal> {
        let sigma: Matrix3<f64> = cov.fixed_view::<3, 3>(0, 0).into_owned();
        Ok(PositionProposal::StudentT(MvtParams::new(t, sigma, cfg.nu)?))
    };
    let von_mises = |theta: f64, var: f64| -> Result<OrientationProposal> {
        let kappa = if var > 0.0 { 1.0 / (3.0 * var) } else { KAPPA_CAP };
        Ok(OrientationProposal::VonMises(VmuParams::new(theta, kappa.min(KAPPA_CAP), cfg.uniform_weight)?))
    };
    match *pose {
        Pose::YawOnly { theta, t_fixed } => Proposal::new(PositionProposal::Fixed(t_fixed), von_mises(theta, cov[(0, 0)])?),
        Pose::Yaw4DoF { t, theta } => Proposal::new(student(t)?, von_mises(theta, cov[(3, 3)])?),
        Pose::Quat6DoF { t, q } => {
            let rot_cov: Matrix3<f64> = cov.fixed_view::<3, 3>(3, 3).into_owned();
            let rot_info = Cholesky::<f64, U3>::new((rot_cov + rot_cov.transpose()) * 0.5)
                .map(|c| c.inverse())
                .ok_or_else(|| Error::SpaceMismatch("rotation covariance is singular".into()))?;
            let jq = quaternion_to_tangent(&q);
            let info_l = jq.transpose() * rot_info * jq;
            let lambda_hat = (info_l + Matrix4::identity())
                .try_inverse()
                .ok_or_else(|| Error::SpaceMismatch("quaternion information is not invertible".into()))?;
            let acg = AcgParams::new(acg_disperse(&((lambda_hat + lambda_hat.transpose()) * 0.5), cfg.acg_dispersion))?;
            Proposal::new(student(t)?, OrientationProposal::Acg(acg))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn student_t_density_at_mode() {
        let p = MvtParams::new(Vector3::new(1.0, -2.0, 0.5), Matrix3::identity(), 3.0).unwrap();
        let expected = 4.0 / (3.0 * 3f64.sqrt() * PI * PI);
        assert_relative_eq!(p.pdf(&p.mu), expected, max_relative = 1e-12);
        assert_relative_eq!(p.pdf(&p.mu), 0.0780, epsilon = 1e-4);
    }

    #[test]
    fn equal_weight_fit_is_sample_moments() {
        let xs = vec![
            Vector3::new(0.0, 1.0, 2.0),
            Vector3::new(1.0, 0.0, -1.0),
            Vector3::new(2.0, 2.0, 0.0),
            Vector3::new(-1.0, 3.0, 1.0),
            Vector3::new(0.5, -1.0, 4.0),
        ];
        let p = mvt_fit(&xs, &[2.0; 5], 3.0).unwrap();
        let mean = xs.iter().sum::<Vector3<f64>>() / 5.0;
        let mut cov = Matrix3::zeros();
        for x in &xs {
            cov += (x - mean) * (x - mean).transpose();
        }
        cov /= 4.0;
        assert_relative_eq!(p.mu, mean, max_relative = 1e-14);
        assert_relative_eq!(p.sigma, cov, max_relative = 1e-12);
    }

    #[test]
    fn one_point_fit_reports_its_location() {
        let xs = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(9.0, 9.0, 9.0)];
        match mvt_fit(&xs, &[1.0, 0.0], 3.0) {
            Err(Error::RankDeficientFit { location }) => assert_eq!(location, xs[0]),
            other => panic!("{other:?}"),
        }
        let v = vmu_fit(&[0.7, -2.0], &[1.0, 0.0], 0.25).unwrap();
        assert_relative_eq!(v.mu, 0.7, epsilon = 1e-15);
    }

    #[test]
    fn bessel_against_reference_values() {
        // I₀ reference values (Abramowitz & Stegun table 9.8 / mpmath)
        let cases = [(0.0, 1.0), (1.0, 1.266_065_877_752_008_4), (5.0, 27.239_871_823_604_45), (19.9, 39_513_376.520_066_8)];
        for (k, i0) in cases {
            let got = (log_bessel_i0_scaled(k) + k).exp();
            assert_relative_eq!(got, i0, max_relative = 1e-13);
        }
        // asymptotic branch
        for (k, v) in [(20.0, -2.410_389_571_755_725_7), (25.0, -2.523_271_995_000_756), (60.0, -2.964_009_810_344_857)] {
            assert_relative_eq!(log_bessel_i0_scaled(k), v, epsilon = 1e-13);
        }
        // large-κ limit ln Ĩ₀ → −½ln(2πκ)
        let k = 1e6;
        assert_relative_eq!(log_bessel_i0_scaled(k), -0.5 * (2.0 * PI * k).ln(), epsilon = 1e-6);
    }

    #[test]
    fn zero_concentration_is_uniform() {
        for alpha in [0.0, 0.25, 1.0] {
            let p = VmuParams::new(0.3, 0.0, alpha).unwrap();
            for th in [-3.0, 0.0, 2.0] {
                assert_relative_eq!(p.pdf(th), 1.0 / (2.0 * PI), max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn kappa_formula_edges() {
        assert_eq!(kappa_estimate(0.0), 0.0);
        assert_eq!(kappa_estimate(1.0), KAPPA_CAP);
        assert!(kappa_estimate(0.999_999_999_9) <= KAPPA_CAP);
    }

    #[test]
    fn circular_mean_of_three() {
        let (mu, _) = circular_mean(&[0.0, 0.0, PI / 2.0], &[1.0; 3]).unwrap();
        assert_relative_eq!(mu, (1.0f64 / 3.0).atan2(2.0 / 3.0), epsilon = 1e-15);
        assert_relative_eq!(mu, 0.4636, epsilon = 1e-4);
    }

    #[test]
    fn acg_isotropic_and_antipodal() {
        let iso = AcgParams::new(Matrix4::identity()).unwrap();
        let l = Vector4::new(0.1, -0.5, 0.3, 0.8).normalize();
        assert_relative_eq!(iso.pdf(&l), 1.0 / (2.0 * PI * PI), max_relative = 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = AcgParams::new(Matrix4::from_diagonal(&Vector4::new(5.0, 1.0, 0.2, 0.01))).unwrap();
        for l in a.sample(&mut rng, 100) {
            assert_relative_eq!(a.pdf(&l), a.pdf(&-l), max_relative = 1e-12);
        }
    }

    #[test]
    fn acg_pdf_is_scale_invariant() {
        let m = Matrix4::from_diagonal(&Vector4::new(3.0, 1.0, 0.5, 0.1));
        let a = AcgParams::new(m).unwrap();
        let b = AcgParams::new(m * 7.0).unwrap();
        let l = Vector4::new(0.3, 0.1, -0.2, 0.9).normalize();
        assert_relative_eq!(a.pdf(&l), b.pdf(&l), max_relative = 1e-12);
    }

    #[test]
    fn acg_fit_satisfies_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = AcgParams::new(Matrix4::from_diagonal(&Vector4::new(4.0, 1.0, 0.5, 0.25))).unwrap();
        let ls = a.sample(&mut rng, 2000);
        let w: Vec<f64> = (0..ls.len()).map(|i| 0.5 + (i % 7) as f64).collect();
        let fp = acg_fixed_point(&ls, &w).unwrap();
        assert!(fp.converged);
        assert_relative_eq!(fp.lambda.trace(), 4.0, epsilon = 1e-12);
        assert!(acg_stationarity_residual(&ls, &w, &fp.lambda) < 1e-6);
    }

    #[test]
    fn acg_fit_needs_effective_samples() {
        let ls = vec![Vector4::new(1.0, 0.0, 0.0, 0.0); 10];
        let mut w = vec![0.0; 10];
        w[0] = 1.0;
        assert!(matches!(acg_fit(&ls, &w, 0.001), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn quaternion_tangent_map_annihilates_q() {
        let q = UnitQuaternion::from_euler_angles(0.3, -0.7, 1.1);
        let m = quaternion_to_tangent(&q);
        assert!((m * q.coords).norm() < 1e-14);
        // a small left rotation δ maps back to its own tangent vector
        let w = Vector3::new(1e-7, -2e-7, 3e-7);
        let dq = (UnitQuaternion::from_scaled_axis(w) * q).coords - q.coords;
        assert_relative_eq!(m * dq, w, max_relative = 1e-6);
    }

    fn result_for(pose: Pose, cov: DMatrix<f64>) -> SolveResult {
        SolveResult { pose, covariance: cov, cost: 0.0, converged: true, iterations: 1, cost_history: vec![0.0], delta: 1.0 }
    }

    #[test]
    fn init_from_yaw_variance() {
        let pose = Pose::yaw4(Vector3::new(0.0, 0.0, 4.0), 0.4);
        let mut cov = DMatrix::identity(4, 4);
        cov[(3, 3)] = 1.0 / 3.0;
        let q = init_proposal(&result_for(pose, cov), &ProposalConfig::default()).unwrap();
        match (&q.position, &q.orientation) {
            (PositionProposal::StudentT(p), OrientationProposal::VonMises(v)) => {
                assert_relative_eq!(v.kappa, 1.0, max_relative = 1e-14);
                assert_relative_eq!(v.mu, 0.4);
                assert_eq!(p.mu, pose.translation());
                assert_eq!(p.sigma, Matrix3::identity());
                assert_relative_eq!(p.covariance().unwrap(), Matrix3::identity() * 3.0);
            }
            _ => panic!("wrong proposal family"),
        }
    }

    #[test]
    fn uninformative_rotation_gives_near_uniform_acg() {
        let pose = Pose::quat6(Vector3::new(0.0, 0.0, 4.0), [0.1, 0.2, 0.3, 0.9]).unwrap();
        let mut cov = DMatrix::identity(6, 6);
        for k in 3..6 {
            cov[(k, k)] = 1e300;
        }
        let q = init_proposal(&result_for(pose, cov), &ProposalConfig::default()).unwrap();
        let OrientationProposal::Acg(a) = &q.orientation else { panic!() };
        let expected = Matrix4::identity() * (1.0 + ACG_DISPERSION);
        assert_relative_eq!(a.lambda, expected, max_relative = 1e-9);
    }

    #[test]
    fn product_rule_logpdf() {
        let pose = Pose::yaw4(Vector3::new(0.1, 0.0, 4.0), 0.2);
        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.01, 0.02, 0.05, 0.1]));
        let q = init_proposal(&result_for(pose, cov), &ProposalConfig::default()).unwrap();
        let probe = Pose::yaw4(Vector3::new(0.2, -0.1, 3.8), -0.5);
        let (PositionProposal::StudentT(p), OrientationProposal::VonMises(v)) = (&q.position, &q.orientation) else {
            panic!()
        };
        assert_relative_eq!(q.log_pdf(&probe), p.log_pdf(&probe.translation()) + v.log_pdf(-0.5), max_relative = 1e-14);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let pose = Pose::quat6(Vector3::new(0.0, 0.0, 4.0), [0.1, 0.2, 0.3, 0.9]).unwrap();
        let q = init_proposal(&result_for(pose, DMatrix::identity(6, 6) * 0.01), &ProposalConfig::default()).unwrap();
        let a = q.sample(&mut ChaCha8Rng::seed_from_u64(8), 50);
        let b = q.sample(&mut ChaCha8Rng::seed_from_u64(8), 50);
        assert_eq!(a, b);
    }

    #[test]
    fn von_mises_sampler_matches_first_moment() {
        // E[cos(θ−μ)] = I₁(κ)/I₀(κ); compare against a quadrature of the pdf instead
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kappa in [0.5, 4.0, 60.0] {
            let p = VmuParams::new(1.0, kappa, 0.0).unwrap();
            let n = 20000;
            let m: f64 = p.sample(&mut rng, 100_000).iter().map(|t| (t - 1.0).cos()).sum::<f64>() / 100_000.0;
            let h = 2.0 * PI / n as f64;
            let quad: f64 = (0..n).map(|i| { let t = -PI + i as f64 * h; (t - 1.0).cos() * p.pdf(t) * h }).sum();
            assert!((m - quad).abs() < 0.01, "κ={kappa}: {m} vs {quad}");
        }
    }
}
