//! Synthetic from-scratch correspondence learning. A hidden rigid shape is
//! observed in many views with known poses; the learner fits its own 3D
//! points and per-point weights by minimizing a pose loss, then is judged by
//! how well the learned correspondences recover held-out poses.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::amis::McConfig;
use crate::error::{Error, Result};
use crate::geometry::{rotation_angle_between, yaw_rotation, Camera, CorrGrad, Correspondence, CorrespondenceSet, Pose, PoseSpace};
use crate::loss::{cost_gradients, kl_loss, kl_loss_with_reg, Activation, RegConfig, WeightHead, WeightHeadGrad};
use crate::par::{self, Exec};
use crate::pnp::{adaptive_delta, lm_solve, random_sample_init, Huber, SolverOptions};
use crate::likelihood::robust_cost;
use crate::synth::{default_camera, random_rotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    Yaw4DoF,
    Quat6DoF,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub n_points: usize,
    /// Half side of the cube the shape is drawn from, meters.
    pub half_extent: f64,
    /// Nominal object depth, meters.
    pub depth: f64,
    /// Relative depth jitter and lateral offset range, meters.
    pub depth_jitter: f64,
    pub lateral: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub noise_sigma: f64,
    pub camera: Camera,
    /// Order of the yaw symmetry (e.g. 4) when the shape is built symmetric.
    pub symmetry: Option<usize>,
    pub space: SpaceKind,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_points: 8,
            half_extent: 0.25,
            depth: 4.0,
            depth_jitter: 0.1,
            lateral: 0.3,
            n_train: 64,
            n_val: 32,
            noise_sigma: 0.5,
            camera: default_camera(),
            symmetry: None,
            space: SpaceKind::Quat6DoF,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if self.n_train < 1 || self.n_val < 1 {
            return bad("scene needs at least one training and one validation view");
        }
        if !(self.noise_sigma >= 0.0) || !(self.half_extent > 0.0) || !(self.depth > 0.0) {
            return bad("noise must be non-negative and extents positive");
        }
        let min = if self.space == SpaceKind::Quat6DoF { 4 } else { 3 };
        if self.n_points < min + 1 {
            return bad("too few points for the pose space");
        }
        if let Some(k) = self.symmetry {
            if k < 2 || self.n_points % k != 0 {
                return bad("symmetry order must divide the point count");
            }
        }
        self.camera.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub x2d: Vec<Vector2<f64>>,
    pub y_gt: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    /// Hidden true shape.
    pub shape: Vec<Vector3<f64>>,
    pub train: Vec<View>,
    pub val: Vec<View>,
}

fn make_shape<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Vec<Vector3<f64>> {
    let h = spec.half_extent;
    match spec.symmetry {
        None => (0..spec.n_points).map(|_| Vector3::from_fn(|_, _| rng.random_range(-h..h))).collect(),
        Some(k) => {
            let base: Vec<Vector3<f64>> =
                (0..spec.n_points / k).map(|_| Vector3::from_fn(|_, _| rng.random_range(-h..h))).collect();
            (0..k)
                .flat_map(|j| {
                    let r = yaw_rotation(2.0 * PI * j as f64 / k as f64);
                    base.iter().map(move |x| r * x).collect::<Vec<_>>()
                })
                .collect()
        }
    }
}

fn sample_pose<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Pose {
    let l = spec.lateral;
    let z = spec.depth * (1.0 + rng.random_range(-spec.depth_jitter..=spec.depth_jitter));
    let t = Vector3::new(rng.random_range(-l..=l), rng.random_range(-l..=l), z);
    match spec.space {
        SpaceKind::Quat6DoF => Pose::Quat6DoF { t, q: random_rotation(rng) },
        SpaceKind::Yaw4DoF => Pose::yaw4(t, rng.random_range(-PI..PI)),
    }
}

fn make_view<R: Rng + ?Sized>(spec: &SceneSpec, shape: &[Vector3<f64>], rng: &mut R) -> Result<View> {
    let noise = Normal::new(0.0, spec.noise_sigma).expect("noise sigma is finite");
    for _ in 0..100 {
        let y_gt = sample_pose(spec, rng);
        let proj: Option<Vec<Vector2<f64>>> =
            shape.iter().map(|x| spec.camera.project(&y_gt.transform(x)).ok()).collect();
        if let Some(p) = proj {
            let x2d = p
                .into_iter()
                .map(|uv| uv + Vector2::new(noise.sample(rng), noise.sample(rng)))
                .collect();
            return Ok(View { x2d, y_gt });
        }
    }
    Err(Error::DegenerateSet("could not place the shape in front of the camera in 100 tries".into()))
}

pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Scene> {
    spec.validate()?;
    let shape = make_shape(spec, rng);
    let train = (0..spec.n_train).map(|_| make_view(spec, &shape, rng)).collect::<Result<_>>()?;
    let val = (0..spec.n_val).map(|_| make_view(spec, &shape, rng)).collect::<Result<_>>()?;
    Ok(Scene { spec: spec.clone(), shape, train, val })
}

// ---------------------------------------------------------------------------
// learner

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerParams {
    pub x3d: Vec<Vector3<f64>>,
    pub head: WeightHead,
}

impl LearnerParams {
    pub fn correspondences(&self, view: &View, camera: &Camera) -> CorrespondenceSet {
        let w = self.head.weights();
        let points = self
            .x3d
            .iter()
            .zip(&view.x2d)
            .zip(w)
            .map(|((x, uv), w)| Correspondence::new(*x, *uv, w))
            .collect();
        CorrespondenceSet::new(points, *camera)
    }

    pub fn is_finite(&self) -> bool {
        self.x3d.iter().all(|x| x.iter().all(|v| v.is_finite()))
            && self.head.logits.iter().flatten().all(|v| v.is_finite())
            && self.head.log_scale.iter().all(|v| v.is_finite())
    }
}

/// The true shape with uniform weights matched to the observation noise.
pub fn oracle_params(scene: &Scene) -> LearnerParams {
    let n = scene.spec.n_points;
    let s = (n as f64 / scene.spec.noise_sigma.max(1e-6)).ln();
    LearnerParams { x3d: scene.shape.clone(), head: WeightHead::new(n, [s; 2], Activation::Softmax) }
}

/// RMS distance of the points from their centroid.
pub fn spread(points: &[Vector3<f64>]) -> f64 {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    (points.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / n).sqrt()
}

/// Coordinate collapse: learned spread below 10% of the true shape's.
pub fn is_degenerate(learned: &[Vector3<f64>], truth: &[Vector3<f64>]) -> bool {
    !(spread(learned) >= 0.1 * spread(truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    MonteCarlo,
    ReprojectionOnly,
    MonteCarloReg,
}

impl LossMode {
    pub fn name(&self) -> &'static str {
        match self {
            LossMode::MonteCarlo => "monte_carlo",
            LossMode::ReprojectionOnly => "reprojection_only",
            LossMode::MonteCarloReg => "monte_carlo+reg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "monte_carlo" => Some(LossMode::MonteCarlo),
            "reprojection_only" => Some(LossMode::ReprojectionOnly),
            "monte_carlo+reg" => Some(LossMode::MonteCarloReg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Base step size; each parameter group scales it by its multiplier.
    pub lr: f64,
    pub lr_x3d: f64,
    pub lr_logits: f64,
    pub lr_log_scale: f64,
    pub momentum: f64,
    /// Cosine decay of the step size down to this fraction at the last step.
    pub lr_final_fraction: f64,
    pub batch_size: usize,
    pub mc: McConfig,
    pub loss_mode: LossMode,
    pub reg_weight: f64,
    pub reg: RegConfig,
    pub solver: SolverOptions,
    pub activation: Activation,
    /// Standard deviation of the initial 3D points, meters.
    pub init_x3d_sigma: f64,
    pub init_log_scale: f64,
    /// Rescale the full gradient to at most this norm (`None` disables clipping).
    pub grad_clip: Option<f64>,
    /// Validation interval in steps (0 disables intermediate evaluation).
    pub eval_every: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1.0,
            lr_x3d: 1e-4,
            lr_logits: 1e-3,
            lr_log_scale: 1e-3,
            momentum: 0.9,
            lr_final_fraction: 0.05,
            batch_size: 8,
            mc: McConfig::default(),
            loss_mode: LossMode::MonteCarlo,
            reg_weight: 0.03,
            reg: RegConfig::default(),
            solver: SolverOptions::default(),
            activation: Activation::Softmax,
            init_x3d_sigma: 0.01,
            init_log_scale: 0.0,
            grad_clip: Some(1000.0),
            eval_every: 50,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        if self.steps < 1 {
            return bad("steps must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad("lr must be positive and momentum in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return bad("final lr fraction must lie in [0, 1]");
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if !(self.init_x3d_sigma >= 0.0) {
            return bad("initial point spread must be non-negative");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip must be positive");
        }
        self.mc.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub l_tgt: f64,
    pub l_pred: f64,
    pub l_kl: f64,
    /// Median validation rotation error in degrees, NaN when not evaluated.
    pub val_rot_deg: f64,
    /// Median validation translation error in meters, NaN when not evaluated.
    pub val_trans: f64,
    /// Views in the minibatch whose loss could not be evaluated.
    pub skipped: usize,
    /// Euclidean norm of the full parameter gradient before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub median_rot_deg: f64,
    pub mean_rot_deg: f64,
    pub median_trans: f64,
    pub mean_trans: f64,
    pub failures: usize,
    pub views: usize,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: LearnerParams,
    pub trace: Vec<TraceRecord>,
    pub summary: EvalSummary,
    pub degenerate: bool,
    /// Step at which a non-finite gradient stopped training.
    pub aborted_at: Option<usize>,
}

pub fn init_params<R: Rng + ?Sized>(n: usize, cfg: &TrainConfig, rng: &mut R) -> LearnerParams {
    let x3d = if cfg.init_x3d_sigma > 0.0 {
        let d = Normal::new(0.0, cfg.init_x3d_sigma).expect("finite sigma");
        (0..n).map(|_| Vector3::from_fn(|_, _| d.sample(rng))).collect()
    } else {
        vec![Vector3::zeros(); n]
    };
    LearnerParams { x3d, head: WeightHead::new(n, [cfg.init_log_scale; 2], cfg.activation) }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn space_of(pose: &Pose) -> PoseSpace {
    pose.space()
}

/// Rotation error in radians, reduced over `k`-fold yaw symmetry.
pub fn rotation_error(est: &Pose, gt: &Pose, symmetry: Option<usize>) -> f64 {
    let k = symmetry.unwrap_or(1).max(1);
    (0..k)
        .map(|j| rotation_angle_between(&est.rotation(), &(gt.rotation() * yaw_rotation(2.0 * PI * j as f64 / k as f64))))
        .fold(f64::INFINITY, f64::min)
}

/// Solves every view with the learned correspondences and summarizes the
/// pose errors against ground truth. Solver failures count as failures and
/// are excluded from the error statistics.
pub fn evaluate(params: &LearnerParams, views: &[View], scene: &SceneSpec, opts: &SolverOptions, seed: u64, exec: Exec) -> EvalSummary {
    let results = par::map_range(exec, views.len(), |i| {
        let v = &views[i];
        let set = params.correspondences(v, &scene.camera);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let space = space_of(&v.y_gt);
        random_sample_init(&set, &space, opts, &mut rng)
            .and_then(|init| lm_solve(&set, &init, opts))
            .map(|r| (rotation_error(&r.pose, &v.y_gt, scene.symmetry), (r.pose.translation() - v.y_gt.translation()).norm()))
            .ok()
            .filter(|(a, b)| a.is_finite() && b.is_finite())
    });
    let ok: Vec<(f64, f64)> = results.iter().flatten().copied().collect();
    let mut rot: Vec<f64> = ok.iter().map(|e| e.0.to_degrees()).collect();
    let mut tr: Vec<f64> = ok.iter().map(|e| e.1).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    EvalSummary {
        mean_rot_deg: mean(&rot),
        mean_trans: mean(&tr),
        median_rot_deg: median(&mut rot),
        median_trans: median(&mut tr),
        failures: views.len() - ok.len(),
        views: views.len(),
    }
}

struct ViewLoss {
    l_tgt: f64,
    l_pred: f64,
    grads: Vec<CorrGrad>,
}

fn view_loss(params: &LearnerParams, view: &View, camera: &Camera, cfg: &TrainConfig, seed: u64) -> Result<ViewLoss> {
    let set = params.correspondences(view, camera);
    let mc = McConfig { seed, exec: Exec::Sequential, ..cfg.mc };
    match cfg.loss_mode {
        LossMode::ReprojectionOnly => {
            set.validate(&view.y_gt.space())?;
            let delta = adaptive_delta(&set, cfg.solver.delta_rel)?;
            let huber = Huber::new(delta);
            let l_tgt = robust_cost(&set, &view.y_gt, &huber);
            if !l_tgt.is_finite() {
                return Err(Error::DegenerateSet("target pose puts a weighted point behind the camera".into()));
            }
            Ok(ViewLoss { l_tgt, l_pred: f64::NAN, grads: cost_gradients(&set, &view.y_gt, &huber) })
        }
        LossMode::MonteCarlo => {
            let r = kl_loss(&set, &view.y_gt, &mc, &cfg.solver)?;
            Ok(ViewLoss { l_tgt: r.l_tgt, l_pred: r.l_pred, grads: r.grads })
        }
        LossMode::MonteCarloReg => {
            let r = kl_loss_with_reg(&set, &view.y_gt, &mc, &cfg.solver, &cfg.reg, cfg.reg_weight)?;
            Ok(ViewLoss { l_tgt: r.l_tgt, l_pred: r.l_pred, grads: r.grads })
        }
    }
}

/// `f + (1−f)·½(1 + cos(π·step/steps))`.
pub fn cosine_factor(step: usize, steps: usize, f: f64) -> f64 {
    let u = step as f64 / steps.max(1) as f64;
    f + (1.0 - f) * 0.5 * (1.0 + (PI * u).cos())
}

/// Momentum SGD on the learner's 3D points and weight head.
pub fn train(scene: &Scene, cfg: &TrainConfig, seed: u64) -> Result<TrainResult> {
    cfg.validate()?;
    let n = scene.spec.n_points;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(n, cfg, &mut rng);
    let mut vel_x = vec![Vector3::zeros(); n];
    let mut vel_logits = vec![[0.0; 2]; n];
    let mut vel_scale = [0.0; 2];
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut aborted_at = None;

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..scene.train.len())).collect();
        let base: u64 = rng.random();
        let losses = par::map_range(cfg.exec, batch.len(), |b| {
            view_loss(&params, &scene.train[batch[b]], &scene.spec.camera, cfg, base.wrapping_add(b as u64))
        });
        let mut gx = vec![Vector3::zeros(); n];
        let mut gw = vec![Vector2::zeros(); n];
        let (mut l_tgt, mut l_pred, mut used) = (0.0, 0.0, 0usize);
        let mut non_finite = false;
        for l in &losses {
            match l {
                Ok(v) => {
                    used += 1;
                    l_tgt += v.l_tgt;
                    l_pred += v.l_pred;
                    for (i, g) in v.grads.iter().enumerate() {
                        gx[i] += g.x3d;
                        gw[i] += g.w2d;
                    }
                }
                Err(Error::NonFiniteGradient { .. } | Error::DegenerateSet(_)) => non_finite = true,
                Err(_) => {}
            }
        }
        let skipped = batch.len() - used;
        if used > 0 {
            let s = 1.0 / used as f64;
            l_tgt *= s;
            l_pred *= s;
            gx.iter_mut().for_each(|g| *g *= s);
            gw.iter_mut().for_each(|g| *g *= s);
        } else {
            l_tgt = f64::NAN;
            l_pred = f64::NAN;
        }
        if non_finite {
            l_tgt = f64::INFINITY;
        }
        let hg = params.head.backward(&gw);
        let grads_finite = gx.iter().all(|g| g.iter().all(|v| v.is_finite()))
            && hg.logits.iter().flatten().all(|v| v.is_finite())
            && hg.log_scale.iter().all(|v| v.is_finite());
        let mut rec = TraceRecord {
            step,
            l_tgt,
            l_pred,
            l_kl: l_tgt + l_pred,
            val_rot_deg: f64::NAN,
            val_trans: f64::NAN,
            skipped,
            grad_norm: grad_norm(&gx, &hg),
        };
        if cfg.loss_mode == LossMode::ReprojectionOnly {
            rec.l_kl = l_tgt;
        }
        if non_finite || !grads_finite || !params.is_finite() {
            trace.push(rec);
            aborted_at = Some(step);
            break;
        }

        let m = cfg.momentum;
        let mut lr = cfg.lr * cosine_factor(step, cfg.steps, cfg.lr_final_fraction);
        if let Some(c) = cfg.grad_clip {
            if rec.grad_norm > c {
                lr *= c / rec.grad_norm;
            }
        }
        for i in 0..n {
            vel_x[i] = vel_x[i] * m - gx[i] * (lr * cfg.lr_x3d);
            params.x3d[i] += vel_x[i];
            for c in 0..2 {
                vel_logits[i][c] = vel_logits[i][c] * m - hg.logits[i][c] * (lr * cfg.lr_logits);
                params.head.logits[i][c] += vel_logits[i][c];
            }
        }
        for c in 0..2 {
            vel_scale[c] = vel_scale[c] * m - hg.log_scale[c] * (lr * cfg.lr_log_scale);
            params.head.log_scale[c] += vel_scale[c];
        }

        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let s = evaluate(&params, &scene.val, &scene.spec, &cfg.solver, seed ^ 0x5eed, cfg.exec);
            rec.val_rot_deg = s.median_rot_deg;
            rec.val_trans = s.median_trans;
        }
        trace.push(rec);
    }

    let summary = evaluate(&params, &scene.val, &scene.spec, &cfg.solver, seed ^ 0x5eed, cfg.exec);
    let degenerate = is_degenerate(&params.x3d, &scene.shape);
    Ok(TrainResult { params, trace, summary, degenerate, aborted_at })
}

fn grad_norm(gx: &[Vector3<f64>], hg: &WeightHeadGrad) -> f64 {
    let sx: f64 = gx.iter().map(|g| g.norm_squared()).sum();
    let sl: f64 = hg.logits.iter().flatten().map(|v| v * v).sum();
    let ss: f64 = hg.log_scale.iter().map(|v| v * v).sum();
    (sx + sl + ss).sqrt()
}

/// Exponential moving average with smoothing `2/(window+1)`, skipping NaNs.
pub fn ema(values: &[f64], window: usize) -> Vec<f64> {
    let a = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut cur = f64::NAN;
    for &v in values {
        if v.is_finite() {
            cur = if cur.is_finite() { cur + a * (v - cur) } else { v };
        }
        out.push(cur);
    }
    out
}

// ---------------------------------------------------------------------------
// posterior modes

#[derive(Debug, Clone, PartialEq)]
pub struct YawMode {
    pub center: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModesReport {
    pub bin_centers: Vec<f64>,
    pub histogram: Vec<f64>,
    pub modes: Vec<YawMode>,
}

/// Finds modes of a circular histogram (normalized masses): each bin is
/// assigned to the local maximum reached by steepest ascent, and maxima
/// whose basin holds at least `min_mass` are reported.
pub fn circular_modes(hist: &[f64], min_mass: f64) -> Vec<YawMode> {
    let n = hist.len();
    let centers: Vec<f64> = (0..n).map(|i| -PI + (i as f64 + 0.5) * 2.0 * PI / n as f64).collect();
    let climb = |mut i: usize| loop {
        let (l, r) = ((i + n - 1) % n, (i + 1) % n);
        let best = if hist[l] > hist[i] && hist[l] >= hist[r] {
            l
        } else if hist[r] > hist[i] {
            r
        } else {
            return i;
        };
        i = best;
    };
    let mut basin = vec![0.0; n];
    for i in 0..n {
        basin[climb(i)] += hist[i];
    }
    let mut modes: Vec<YawMode> =
        (0..n).filter(|&i| basin[i] >= min_mass && basin[i] > 0.0).map(|i| YawMode { center: centers[i], mass: basin[i] }).collect();
    modes.sort_by(|a, b| b.mass.total_cmp(&a.mass));
    modes
}

/// Bins weighted yaw values into `bins` equal sectors of `[−π, π)`.
pub fn yaw_histogram(yaws: &[f64], weights: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    let total: f64 = weights.iter().sum();
    for (y, w) in yaws.iter().zip(weights) {
        let u = (crate::geometry::wrap_angle(*y) + PI) / (2.0 * PI);
        let k = ((u * bins as f64) as usize).min(bins - 1);
        h[k] += w / total;
    }
    h
}

/// AMIS posterior over yaw for one view, binned and split into modes
/// holding at least 5% of the mass.
pub fn posterior_modes_report(set: &CorrespondenceSet, space: &PoseSpace, opts: &SolverOptions, mc: &McConfig, bins: usize) -> Result<ModesReport> {
    if set.points.iter().all(|p| p.w2d == Vector2::zeros()) {
        return Err(Error::DegenerateSet("all weights are zero".into()));
    }
    if matches!(space, PoseSpace::Quat6DoF) {
        return Err(Error::SpaceMismatch("mode report needs a yaw pose space".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    rng.set_stream(1);
    let solve = crate::pnp::solve(set, space, opts, &mut rng)?;
    let batch = crate::amis::amis(set, &solve, mc, &crate::distributions::ProposalConfig::default())?;
    batch_modes(&batch, bins)
}

/// Weighted yaw histogram of a sample batch and its modes holding at least
/// 5% of the mass.
pub fn batch_modes(batch: &crate::amis::McBatch, bins: usize) -> Result<ModesReport> {
    if bins < 3 {
        return Err(Error::InvalidInput("mode report needs at least 3 bins".into()));
    }
    let w = batch.normalized_weights()?;
    let yaws = batch
        .samples
        .iter()
        .map(|s| s.pose.yaw())
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::SpaceMismatch("mode report needs a yaw pose space".into()))?;
    let histogram = yaw_histogram(&yaws, &w, bins);
    let modes = circular_modes(&histogram, 0.05);
    let bin_centers = (0..bins).map(|i| -PI + (i as f64 + 0.5) * 2.0 * PI / bins as f64).collect();
    Ok(ModesReport { bin_centers, histogram, modes })
}
