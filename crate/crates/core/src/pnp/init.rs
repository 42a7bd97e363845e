//! Random-sampling initialization, ground-truth-guarded training solve and
//! the batch solve entry point.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CorrespondenceSet, Pose, PoseSpace};
use crate::likelihood::log_likelihood;
use crate::par::{self, Exec};
use crate::pnp::kernel::{adaptive_delta, Huber};
use crate::pnp::lm::{lm_iterate, lm_solve_with_delta, SolveResult, SolverOptions};
use crate::synth::random_rotation;

/// Draws `n` distinct indices, each draw proportional to `‖w2d_i‖₁` among
/// the indices not yet chosen.
pub fn sample_subset<R: Rng + ?Sized>(set: &CorrespondenceSet, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut mass: Vec<f64> = set.points.iter().map(|p| p.w2d.lp_norm(1)).collect();
    let nonzero = mass.iter().filter(|m| **m > 0.0).count();
    if nonzero < n {
        return Err(Error::DegenerateSet(format!(
            "only {nonzero} points carry weight, subsets need {n}"
        )));
    }
    let mut chosen = Vec::with_capacity(n);
    for _ in 0..n {
        let dist = WeightedIndex::new(&mass).map_err(|e| Error::DegenerateSet(e.to_string()))?;
        let i = dist.sample(rng);
        chosen.push(i);
        mass[i] = 0.0;
    }
    Ok(chosen)
}

/// Translation that places the weighted 3D centroid on the ray through the
/// weighted 2D centroid, at a depth matching the 3D/2D spread ratio.
pub fn center_translation(set: &CorrespondenceSet, rotation: &nalgebra::Matrix3<f64>) -> Vector3<f64> {
    let cam = &set.camera;
    let (mut wsum, mut c2, mut c3) = (0.0, Vector2::zeros(), Vector3::zeros());
    for p in &set.points {
        let w = p.w2d.lp_norm(1);
        wsum += w;
        c2 += p.x2d * w;
        c3 += p.x3d * w;
    }
    if wsum <= 0.0 {
        return Vector3::new(0.0, 0.0, 1.0);
    }
    c2 /= wsum;
    c3 /= wsum;
    let (mut s2, mut s3) = (0.0, 0.0);
    for p in &set.points {
        let w = p.w2d.lp_norm(1);
        s2 += w * (p.x2d - c2).norm_squared();
        s3 += w * (p.x3d - c3).norm_squared();
    }
    let focal = (cam.fx * cam.fy).sqrt();
    let depth = if s2 > 0.0 && s3 > 0.0 { focal * (s3 / s2).sqrt() } else { 1.0 };
    let depth = depth.clamp(10.0 * crate::geometry::Z_MIN, 1e6);
    let ray = Vector3::new((c2.x - cam.cx) / cam.fx, (c2.y - cam.cy) / cam.fy, 1.0);
    ray * depth - rotation * c3
}

fn seed_pose<R: Rng + ?Sized>(set: &CorrespondenceSet, space: &PoseSpace, rng: &mut R) -> Pose {
    match *space {
        PoseSpace::YawOnly { t_fixed } => Pose::yaw_only(rng.random_range(-PI..PI), t_fixed),
        PoseSpace::Yaw4DoF => {
            let theta = rng.random_range(-PI..PI);
            let t = center_translation(set, &crate::geometry::yaw_rotation(theta));
            Pose::yaw4(t, theta)
        }
        PoseSpace::Quat6DoF => {
            let q = random_rotation(rng);
            let t = center_translation(set, q.to_rotation_matrix().matrix());
            Pose::Quat6DoF { t, q }
        }
    }
}

/// Hypothesis with the highest full-set log-likelihood over `num_subsets`
/// weighted random subsets, each refined by `init_iters` LM iterations.
pub fn random_sample_init<R: Rng + ?Sized>(
    set: &CorrespondenceSet,
    space: &PoseSpace,
    opts: &SolverOptions,
    rng: &mut R,
) -> Result<Pose> {
    set.validate(space)?;
    opts.validate(set.len())?;
    let delta = adaptive_delta(set, opts.delta_rel)?;
    random_sample_init_with_delta(set, space, delta, opts, rng).map(|(pose, _)| pose)
}

pub(crate) fn random_sample_init_with_delta<R: Rng + ?Sized>(
    set: &CorrespondenceSet,
    space: &PoseSpace,
    delta: f64,
    opts: &SolverOptions,
    rng: &mut R,
) -> Result<(Pose, f64)> {
    let huber = Huber::new(delta);
    let mut best: Option<(Pose, f64)> = None;
    for _ in 0..opts.num_subsets {
        let subset = sample_subset(set, opts.subset_size, rng)?;
        let seed = seed_pose(set, space, rng);
        let hyp = match lm_iterate(set, Some(&subset), seed, &huber, opts, opts.init_iters) {
            Ok(out) => out.pose,
            Err(_) => continue,
        };
        let ll = log_likelihood(set, &hyp, &huber);
        if ll.is_finite() && best.as_ref().is_none_or(|(_, b)| ll > *b) {
            best = Some((hyp, ll));
        }
    }
    best.ok_or(Error::NoValidHypothesis(opts.num_subsets))
}

/// Random-sampling initialization followed by a full LM solve.
pub fn solve<R: Rng + ?Sized>(
    set: &CorrespondenceSet,
    space: &PoseSpace,
    opts: &SolverOptions,
    rng: &mut R,
) -> Result<SolveResult> {
    set.validate(space)?;
    opts.validate(set.len())?;
    let delta = adaptive_delta(set, opts.delta_rel)?;
    let (init, _) = random_sample_init_with_delta(set, space, delta, opts, rng)?;
    lm_solve_with_delta(set, &init, delta, opts)
}

/// Training-mode solve: LM starts from whichever of `y_gt` and the
/// random-sampling hypothesis has the higher likelihood.
pub fn solve_guarded<R: Rng + ?Sized>(
    set: &CorrespondenceSet,
    y_gt: &Pose,
    opts: &SolverOptions,
    rng: &mut R,
) -> Result<SolveResult> {
    let space = y_gt.space();
    set.validate(&space)?;
    opts.validate(set.len())?;
    let delta = adaptive_delta(set, opts.delta_rel)?;
    solve_guarded_with_delta(set, y_gt, delta, opts, rng)
}

pub(crate) fn solve_guarded_with_delta<R: Rng + ?Sized>(
    set: &CorrespondenceSet,
    y_gt: &Pose,
    delta: f64,
    opts: &SolverOptions,
    rng: &mut R,
) -> Result<SolveResult> {
    let huber = Huber::new(delta);
    let ll_gt = log_likelihood(set, y_gt, &huber);
    let init = match random_sample_init_with_delta(set, &y_gt.space(), delta, opts, rng) {
        Ok((hyp, ll)) if ll > ll_gt => hyp,
        _ => *y_gt,
    };
    lm_solve_with_delta(set, &init, delta, opts)
}

/// Solves many independent problems; each gets its own RNG stream derived
/// from `seed` and its index, so results do not depend on scheduling.
pub fn solve_many(
    exec: Exec,
    sets: &[CorrespondenceSet],
    space: &PoseSpace,
    opts: &SolverOptions,
    seed: u64,
) -> Vec<Result<SolveResult>> {
    par::map_range(exec, sets.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        solve(&sets[i], space, opts, &mut rng)
    })
}
