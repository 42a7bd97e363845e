use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use propnp::amis::amis;
use propnp::distributions::ProposalConfig;
use propnp::geometry::{CorrespondenceSet, Pose, PoseSpace};
use propnp::likelihood::robust_cost;
use propnp::loss::{cost_gradients, grad_weights, kl_loss, kl_loss_with_reg, Activation, RegConfig};
use propnp::pnp::{self, adaptive_delta, build_system, lm_solve, Huber};
use propnp::quadrature::{quadrature_loss, DEFAULT_GRID};
use propnp::toy::{self, batch_modes, evaluate, generate_scene, oracle_params, train, TrainResult};
use propnp::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::schema::*;
use crate::CliError;

/// Relative step for central differences.
const FD_STEP: f64 = 1e-6;
/// Denominator floor for relative gradient errors.
const REL_FLOOR: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-3;
/// Tangent offset from gt at which non-quadrature checks are evaluated.
const POSE_OFFSET: f64 = 0.02;
const MODE_BINS: usize = 72;

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("documents serialize")
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub struct Outcome {
    pub stdout: String,
    pub code: i32,
}

pub fn solve(scene_path: &Path, init: Option<&Path>, seed: u64) -> Result<Outcome, CliError> {
    let sc = SceneFile::load(scene_path)?;
    let result = match init {
        Some(p) => {
            let prev: SolveOutput = read_json(p)?;
            check_version(prev.format_version, "init")?;
            if prev.pose_space.to_space() != sc.space {
                return Err(CliError::Input(format!("{}: pose_space does not match the scene", p.display())));
            }
            let pose = prev.pose.to_pose(&sc.space, "init.pose")?;
            lm_solve(&sc.set, &pose, &sc.solver)
        }
        None => pnp::solve(&sc.set, &sc.space, &sc.solver, &mut rng(seed, 0)),
    }
    .map_err(|e| CliError::core("solve", e))?;
    let cov = &result.covariance;
    let doc = SolveOutput {
        format_version: FORMAT_VERSION,
        pose_space: PoseSpaceDto::from_space(&sc.space),
        pose: PoseDto::from_pose(&result.pose),
        covariance: (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect(),
        cost: result.cost,
        converged: result.converged,
        iterations: result.iterations,
        huber_delta: result.delta,
    };
    Ok(Outcome { stdout: to_json(&doc), code: if result.converged { 0 } else { 2 } })
}

fn pose_columns(space: &PoseSpace) -> &'static [&'static str] {
    match space {
        PoseSpace::YawOnly { .. } => &["yaw"],
        PoseSpace::Yaw4DoF => &["t_x", "t_y", "t_z", "yaw"],
        PoseSpace::Quat6DoF => &["t_x", "t_y", "t_z", "q_x", "q_y", "q_z", "q_w"],
    }
}

fn pose_values(pose: &Pose) -> Vec<f64> {
    match *pose {
        Pose::YawOnly { theta, .. } => vec![theta],
        Pose::Yaw4DoF { t, theta } => vec![t.x, t.y, t.z, theta],
        Pose::Quat6DoF { t, q } => {
            let c = q.quaternion().coords;
            vec![t.x, t.y, t.z, c.x, c.y, c.z, c.w]
        }
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

fn versioned_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    let mut f = fs::File::create(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    writeln!(f, "# format_version={FORMAT_VERSION}").map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(f))
}

pub fn sample(scene_path: &Path, samples: Option<usize>, out: Option<&Path>, seed: u64) -> Result<Outcome, CliError> {
    let sc = SceneFile::load(scene_path)?;
    let mut mc = sc.mc;
    mc.seed = seed;
    if let Some(k) = samples {
        mc.samples_per_iter = k;
    }
    mc.validate().map_err(|e| CliError::core("--samples", e))?;
    let result = pnp::solve(&sc.set, &sc.space, &sc.solver, &mut rng(seed, 1)).map_err(|e| CliError::core("solve", e))?;
    let batch = amis(&sc.set, &result, &mc, &ProposalConfig::default()).map_err(|e| CliError::core("sample", e))?;

    if let Some(path) = out {
        let mut w = versioned_writer(path)?;
        let mut header = vec!["iteration"];
        header.extend_from_slice(pose_columns(&sc.space));
        header.extend_from_slice(&["log_likelihood", "log_weight"]);
        w.write_record(&header).map_err(csv_err(path))?;
        for (i, s) in batch.samples.iter().enumerate() {
            let mut row = vec![(i / mc.samples_per_iter).to_string()];
            row.extend(pose_values(&s.pose).iter().map(|v| v.to_string()));
            row.push(s.log_p.to_string());
            row.push(s.log_v.to_string());
            w.write_record(&row).map_err(csv_err(path))?;
        }
        w.flush().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }

    let modes = match sc.space {
        PoseSpace::Quat6DoF => None,
        _ => {
            let r = batch_modes(&batch, MODE_BINS).map_err(|e| CliError::core("modes", e))?;
            Some(r.modes.iter().map(|m| ModeDto { center: m.center, mass: m.mass }).collect())
        }
    };
    let doc = SampleSummary {
        format_version: FORMAT_VERSION,
        rows: batch.samples.len(),
        iterations: mc.iterations,
        samples_per_iter: mc.samples_per_iter,
        l_pred: batch.l_pred,
        effective_sample_size: batch.effective_sample_size(),
        refit_fallbacks: batch.fallbacks,
        modes,
    };
    Ok(Outcome { stdout: to_json(&doc), code: 0 })
}

fn require_gt(sc: &Scene) -> Result<Pose, CliError> {
    sc.gt.ok_or_else(|| CliError::Input("gt: the scene has no ground-truth pose".into()))
}

pub fn loss(scene_path: &Path, samples: Option<usize>, reg_weight: Option<f64>, seed: u64) -> Result<Outcome, CliError> {
    let sc = SceneFile::load(scene_path)?;
    let gt = require_gt(&sc)?;
    let mut mc = sc.mc;
    mc.seed = seed;
    if let Some(k) = samples {
        mc.samples_per_iter = k;
    }
    mc.validate().map_err(|e| CliError::core("--samples", e))?;
    let report = match reg_weight {
        Some(w) => kl_loss_with_reg(&sc.set, &gt, &mc, &sc.solver, &RegConfig::default(), w),
        None => kl_loss(&sc.set, &gt, &mc, &sc.solver),
    }
    .map_err(|e| CliError::core("loss", e))?;
    let split = grad_weights(&sc.set, &gt, &report.batch, &Huber::new(report.delta)).map_err(|e| CliError::core("loss", e))?;
    let doc = LossOutput {
        format_version: FORMAT_VERSION,
        l_tgt: report.l_tgt,
        l_pred: report.l_pred,
        l_kl: report.l_kl,
        l_reg: report.l_reg,
        huber_delta: report.delta,
        effective_sample_size: report.batch.effective_sample_size(),
        grads: report.grads.iter().map(|g| PointGradDto { x3d: g.x3d.into(), x2d: g.x2d.into(), w2d: g.w2d.into() }).collect(),
        weight_uncertainty: split.uncertainty.iter().map(|v| [v.x, v.y]).collect(),
        weight_discrimination: split.discrimination.iter().map(|v| [v.x, v.y]).collect(),
    };
    Ok(Outcome { stdout: to_json(&doc), code: 0 })
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn perturbed(set: &CorrespondenceSet, i: usize, k: usize, h: f64) -> CorrespondenceSet {
    let mut s = set.clone();
    let p = &mut s.points[i];
    match k {
        0..=2 => p.x3d[k] += h,
        3..=4 => p.x2d[k - 3] += h,
        _ => p.w2d[k - 5] += h,
    }
    s
}

fn coordinate(set: &CorrespondenceSet, i: usize, k: usize) -> f64 {
    let p = &set.points[i];
    match k {
        0..=2 => p.x3d[k],
        3..=4 => p.x2d[k - 3],
        _ => p.w2d[k - 5],
    }
}

/// Checks correspondence gradients against central differences. Weights at
/// zero are differentiated one-sidedly so they stay non-negative.
fn check_correspondences<F>(set: &CorrespondenceSet, analytic: &[[f64; 7]], f: F) -> Result<(usize, f64), Error>
where
    F: Fn(&CorrespondenceSet) -> Result<f64, Error>,
{
    let (mut n, mut worst) = (0, 0.0f64);
    for i in 0..set.len() {
        for k in 0..7 {
            let h = FD_STEP * coordinate(set, i, k).abs().max(1.0);
            let fd = if k >= 5 && coordinate(set, i, k) < h {
                (f(&perturbed(set, i, k, h))? - f(set)?) / h
            } else {
                (f(&perturbed(set, i, k, h))? - f(&perturbed(set, i, k, -h))?) / (2.0 * h)
            };
            worst = worst.max(rel_error(analytic[i][k], fd));
            n += 1;
        }
    }
    Ok((n, worst))
}

pub fn gradcheck(scene_path: &Path) -> Result<Outcome, CliError> {
    let sc = SceneFile::load(scene_path)?;
    let gt = require_gt(&sc)?;
    let delta = adaptive_delta(&sc.set, sc.solver.delta_rel).map_err(|e| CliError::core("gradcheck", e))?;
    let huber = Huber::new(delta);
    let fail = |e| CliError::core("gradcheck", e);

    let (objective, checked, worst) = if matches!(sc.space, PoseSpace::YawOnly { .. }) {
        let q = quadrature_loss(&sc.set, &gt, &huber, DEFAULT_GRID).map_err(fail)?;
        let analytic: Vec<[f64; 7]> = q.grads.iter().map(|g| g.to_array()).collect();
        let (n, w) = check_correspondences(&sc.set, &analytic, |s| quadrature_loss(s, &gt, &huber, DEFAULT_GRID).map(|q| q.l_kl))
            .map_err(fail)?;
        ("quadrature_kl", n, w)
    } else {
        // gradients vanish at a noise-free optimum, so check slightly off it
        let at = gt.retract(&vec![POSE_OFFSET; gt.dof()]);
        let cost = |s: &CorrespondenceSet| {
            let c = robust_cost(s, &at, &huber);
            if c.is_finite() { Ok(c) } else { Err(Error::DegenerateSet("check pose puts a point behind the camera".into())) }
        };
        let analytic: Vec<[f64; 7]> = cost_gradients(&sc.set, &at, &huber).iter().map(|g| g.to_array()).collect();
        let (mut n, mut w) = check_correspondences(&sc.set, &analytic, cost).map_err(fail)?;
        let g = build_system(&sc.set, &at, &huber).map_err(fail)?.gradient();
        for k in 0..at.dof() {
            let mut e = vec![0.0; at.dof()];
            e[k] = FD_STEP;
            let plus = robust_cost(&sc.set, &at.retract(&e), &huber);
            e[k] = -FD_STEP;
            let minus = robust_cost(&sc.set, &at.retract(&e), &huber);
            w = w.max(rel_error(g[k], (plus - minus) / (2.0 * FD_STEP)));
            n += 1;
        }
        ("robust_cost", n, w)
    };
    let pass = worst < GRADCHECK_TOL;
    let doc = GradcheckOutput {
        format_version: FORMAT_VERSION,
        objective: objective.into(),
        checked,
        max_rel_error: worst,
        tolerance: GRADCHECK_TOL,
        pass,
    };
    Ok(Outcome { stdout: to_json(&doc), code: if pass { 0 } else { 2 } })
}

fn opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn write_trace(path: &Path, r: &TrainResult) -> Result<(), CliError> {
    let mut w = versioned_writer(path)?;
    for t in &r.trace {
        let row = TraceRow {
            step: t.step,
            l_tgt: opt(t.l_tgt),
            l_pred: opt(t.l_pred),
            l_kl: opt(t.l_kl),
            val_rot_deg: opt(t.val_rot_deg),
            val_trans: opt(t.val_trans),
            grad_norm: opt(t.grad_norm),
        };
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn params_doc(r: &TrainResult) -> ParamsFile {
    ParamsFile {
        format_version: FORMAT_VERSION,
        x3d: r.params.x3d.iter().map(|x| (*x).into()).collect(),
        logits: r.params.head.logits.clone(),
        log_scale: r.params.head.log_scale,
        activation: match r.params.head.activation {
            Activation::Softmax => ActivationDto::Softmax,
            Activation::Exp => ActivationDto::Exp,
        },
    }
}

pub fn toytrain(config: &Path, out: &Path, seed: u64) -> Result<Outcome, CliError> {
    let (spec, cfg) = ToyConfigFile::load(config)?;
    fs::create_dir_all(out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    let scene = generate_scene(&spec, &mut rng(seed, 0)).map_err(|e| CliError::core("scene", e))?;
    let r = train(&scene, &cfg, seed).map_err(|e| CliError::core("train", e))?;
    write_trace(&out.join("trace.csv"), &r)?;
    write_file(&out.join("params.json"), &to_json(&params_doc(&r)))?;

    let oracle = evaluate(&oracle_params(&scene), &scene.val, &spec, &cfg.solver, seed ^ 0x5eed, cfg.exec);
    let s = &r.summary;
    let ratio = (s.median_rot_deg / oracle.median_rot_deg).max(s.median_trans / oracle.median_trans);
    let converged = r.aborted_at.is_none()
        && !r.degenerate
        && s.median_rot_deg < 2.0
        && s.median_trans < 0.02 * spec.depth;
    let doc = TrainSummary {
        format_version: FORMAT_VERSION,
        loss_mode: cfg.loss_mode.name().into(),
        seed,
        steps_run: r.trace.len(),
        aborted_at: r.aborted_at,
        median_rot_deg: s.median_rot_deg,
        median_trans: s.median_trans,
        mean_rot_deg: s.mean_rot_deg,
        mean_trans: s.mean_trans,
        eval_failures: s.failures,
        degenerate: r.degenerate,
        oracle_median_rot_deg: oracle.median_rot_deg,
        oracle_median_trans: oracle.median_trans,
        error_ratio: ratio,
        converged,
    };
    let text = to_json(&doc);
    write_file(&out.join("summary.json"), &text)?;
    if let Some(step) = r.aborted_at {
        return Err(CliError::Abort { step, dump: out.to_path_buf() });
    }
    Ok(Outcome { stdout: text, code: 0 })
}

/// Reads a training trace written by `toytrain`.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let first = text.lines().next().unwrap_or_default();
    let version = first
        .strip_prefix("# format_version=")
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| CliError::Input(format!("{}: line 1: expected `# format_version=N`", path.display())))?;
    check_version(version, "trace")?;
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    rd.deserialize().map(|r| r.map_err(csv_err(path))).collect()
}

pub fn plot(trace: &Path, out: &Path) -> Result<Outcome, CliError> {
    let rows = read_trace(trace)?;
    if rows.is_empty() {
        return Err(CliError::Input(format!("{}: trace has no rows", trace.display())));
    }
    fs::create_dir_all(out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
    let steps: Vec<f64> = rows.iter().map(|r| r.step as f64).collect();
    let col = |f: fn(&TraceRow) -> Option<f64>| rows.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect::<Vec<f64>>();
    let l_kl = col(|r| r.l_kl);
    let smooth = toy::ema(&l_kl, 50);
    let loss_svg = crate::plot::line_chart(
        "Training loss",
        "step",
        "loss",
        &[("l_kl", &steps, &l_kl), ("l_kl (EMA 50)", &steps, &smooth), ("l_tgt", &steps, &col(|r| r.l_tgt))],
    );
    let err_svg = crate::plot::line_chart(
        "Validation error",
        "step",
        "median error",
        &[("rotation (deg)", &steps, &col(|r| r.val_rot_deg)), ("translation (m)", &steps, &col(|r| r.val_trans))],
    );
    let files: Vec<PathBuf> = vec![out.join("loss.svg"), out.join("error.svg")];
    write_file(&files[0], &loss_svg)?;
    write_file(&files[1], &err_svg)?;
    let listing = files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n");
    Ok(Outcome { stdout: listing, code: 0 })
}
