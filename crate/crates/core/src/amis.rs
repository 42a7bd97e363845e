//! Importance-sampling estimates of the log normalizer
//! `log ∫ exp(−½Σρ(‖f_i(y)‖²)) dy`, plain and adaptive (AMIS with
//! deterministic-mixture weights). All weights are kept in the log domain.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distributions::{init_proposal, Proposal, ProposalConfig};
use crate::error::{Error, Result};
use crate::geometry::{CorrespondenceSet, Pose};
use crate::likelihood::log_likelihood;
use crate::par::{self, Exec};
use crate::pnp::{Huber, SolveResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    /// Number of AMIS iterations `T`.
    pub iterations: usize,
    /// Samples drawn per iteration `K′`.
    pub samples_per_iter: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { iterations: 4, samples_per_iter: 128, seed: 0, exec: Exec::default() }
    }
}

impl McConfig {
    pub fn new(iterations: usize, samples_per_iter: usize, seed: u64) -> Self {
        Self { iterations, samples_per_iter, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.samples_per_iter < 2 {
            return Err(Error::InvalidInput(format!(
                "need T ≥ 1 and K′ ≥ 2 (T={}, K′={})",
                self.iterations, self.samples_per_iter
            )));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.iterations * self.samples_per_iter
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSample {
    pub pose: Pose,
    /// `log p(X|y)`.
    pub log_p: f64,
    /// `log v = log p − log q̄`, with `q̄` the proposal (mixture) density.
    pub log_v: f64,
}

#[derive(Debug, Clone)]
pub struct McBatch {
    pub samples: Vec<McSample>,
    /// One proposal per iteration, in order of use.
    pub proposals: Vec<Proposal>,
    /// `logsumexp(log_v) − log(total samples)`.
    pub l_pred: f64,
    /// Refits that fell back to the previous proposal component.
    pub fallbacks: usize,
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Self-normalized weights `v_j / Σv`; samples with `log_v = −∞` get 0.
pub fn normalized_weights(log_v: &[f64]) -> Result<Vec<f64>> {
    let m = log_v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::AllWeightsZero);
    }
    let w: Vec<f64> = log_v.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / s).collect())
}

impl McBatch {
    pub fn log_weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.log_v).collect()
    }

    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        normalized_weights(&self.log_weights())
    }

    pub fn effective_sample_size(&self) -> f64 {
        self.normalized_weights()
            .map(|w| crate::distributions::effective_sample_size(&w))
            .unwrap_or(0.0)
    }
}

fn finish(samples: Vec<McSample>, proposals: Vec<Proposal>, fallbacks: usize) -> Result<McBatch> {
    let n = samples.len() as f64;
    let lse = log_sum_exp(samples.iter().map(|s| s.log_v));
    if lse == f64::NEG_INFINITY {
        return Err(Error::AllWeightsZero);
    }
    Ok(McBatch { samples, proposals, l_pred: lse - n.ln(), fallbacks })
}

/// Plain importance sampling with a single proposal.
pub fn vanilla_is<R: rand::Rng + ?Sized>(
    set: &CorrespondenceSet,
    q: &Proposal,
    k: usize,
    huber: &Huber,
    exec: Exec,
    rng: &mut R,
) -> Result<McBatch> {
    if k == 0 {
        return Err(Error::InvalidInput("sample count must be positive".into()));
    }
    let poses = q.sample(rng, k);
    let samples = par::map(exec, &poses, |y| {
        let log_p = log_likelihood(set, y, huber);
        McSample { pose: *y, log_p, log_v: log_p - q.log_pdf(y) }
    });
    finish(samples, vec![q.clone()], 0)
}

/// AMIS seeded with the Laplace proposal of `solve`. After iteration `t`,
/// every sample drawn so far is weighted against the equal mixture of the
/// first `t` proposals, and the next proposal is refit from all of them.
pub fn amis(set: &CorrespondenceSet, solve: &SolveResult, cfg: &McConfig, pcfg: &ProposalConfig) -> Result<McBatch> {
    cfg.validate()?;
    let huber = Huber::new(solve.delta);
    let q1 = init_proposal(solve, pcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    amis_from(set, q1, &huber, cfg, pcfg, &mut rng)
}

/// AMIS from an explicit initial proposal.
pub fn amis_from<R: rand::Rng + ?Sized>(
    set: &CorrespondenceSet,
    q1: Proposal,
    huber: &Huber,
    cfg: &McConfig,
    pcfg: &ProposalConfig,
    rng: &mut R,
) -> Result<McBatch> {
    cfg.validate()?;
    let mut proposals = vec![q1];
    let mut poses: Vec<Pose> = Vec::with_capacity(cfg.total_samples());
    let mut log_p: Vec<f64> = Vec::with_capacity(cfg.total_samples());
    // log Σ_m q_m(y_j) over the proposals used so far
    let mut log_qsum: Vec<f64> = Vec::with_capacity(cfg.total_samples());
    let mut log_v: Vec<f64> = Vec::new();
    let mut fallbacks = 0;

    for t in 1..=cfg.iterations {
        let q_t = proposals.last().expect("at least one proposal").clone();
        let old = poses.len();
        let fresh = q_t.sample(rng, cfg.samples_per_iter);
        let fresh_lp = par::map(cfg.exec, &fresh, |y| log_likelihood(set, y, huber));
        for j in 0..old {
            log_qsum[j] = log_add_exp(log_qsum[j], q_t.log_pdf(&poses[j]));
        }
        let fresh_q = par::map(cfg.exec, &fresh, |y| log_sum_exp(proposals.iter().map(|q| q.log_pdf(y))));
        poses.extend(fresh);
        log_p.extend(fresh_lp);
        log_qsum.extend(fresh_q);

        let ln_t = (t as f64).ln();
        log_v = log_p.iter().zip(&log_qsum).map(|(p, q)| p - (q - ln_t)).collect();

        if t < cfg.iterations {
            let next = match normalized_weights(&log_v) {
                Ok(w) => {
                    let (q, fb) = q_t.refit(&poses, &w, pcfg);
                    fallbacks += fb;
                    q
                }
                Err(_) => {
                    fallbacks += 1;
                    q_t
                }
            };
            proposals.push(next);
        }
    }

    let samples = poses
        .into_iter()
        .zip(log_p)
        .zip(log_v)
        .map(|((pose, log_p), log_v)| McSample { pose, log_p, log_v })
        .collect();
    finish(samples, proposals, fallbacks)
}

/// Self-normalized importance-weighted mean of `g` over the batch.
/// `g` is evaluated only at samples with nonzero weight.
pub fn expectation<F>(batch: &McBatch, g: F) -> Result<Vec<f64>>
where
    F: Fn(&Pose) -> Vec<f64>,
{
    let w = batch.normalized_weights()?;
    let mut acc: Option<Vec<f64>> = None;
    for (s, wj) in batch.samples.iter().zip(&w) {
        if *wj == 0.0 {
            continue;
        }
        let v = g(&s.pose);
        let a = acc.get_or_insert_with(|| vec![0.0; v.len()]);
        for (ai, vi) in a.iter_mut().zip(&v) {
            *ai += wj * vi;
        }
    }
    acc.ok_or(Error::AllWeightsZero)
}

/// `clamp(−a·ln e + b, 0, 1)` for a position error `e`.
pub fn position_score(error: f64, a: f64, b: f64) -> f64 {
    if a == 0.0 {
        return b.clamp(0.0, 1.0);
    }
    let s = -a * error.ln() + b;
    if s.is_nan() { 0.0 } else { s.clamp(0.0, 1.0) }
}

/// Weighted mean of the position score of every sample's ground-plane (XZ)
/// distance to `pose_star`.
pub fn mc_score(batch: &McBatch, pose_star: &Pose, a: f64, b: f64) -> Result<f64> {
    if !pose_star.space().has_translation() {
        return Err(Error::SpaceMismatch("the score needs a pose with free translation".into()));
    }
    let t0 = pose_star.translation();
    let v = expectation(batch, |y| {
        let d = y.translation() - t0;
        vec![position_score((d.x * d.x + d.z * d.z).sqrt(), a, b)]
    })?;
    Ok(v[0])
}
