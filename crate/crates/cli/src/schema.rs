//! On-disk JSON documents. Units: meters for 3D coordinates and translations,
//! pixels for 2D coordinates and intrinsics, inverse pixels for weights,
//! radians for yaw. Quaternions are stored as `[x, y, z, w]`.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use propnp::amis::McConfig;
use propnp::geometry::{Camera, Correspondence, CorrespondenceSet, Pose, PoseSpace};
use propnp::loss::{Activation, RegConfig};
use propnp::pnp::SolverOptions;
use propnp::toy::{LossMode, SceneSpec, SpaceKind, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let doc: T = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(doc)
}

pub fn check_version(v: u32, what: &str) -> Result<(), CliError> {
    if v != FORMAT_VERSION {
        return Err(CliError::Input(format!("{what}: format_version {v} is not supported (expected {FORMAT_VERSION})")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDto {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoseSpaceDto {
    YawOnly { t_fixed: [f64; 3] },
    Yaw4dof,
    Quat6dof,
}

impl PoseSpaceDto {
    pub fn to_space(self) -> PoseSpace {
        match self {
            PoseSpaceDto::YawOnly { t_fixed } => PoseSpace::YawOnly { t_fixed: Vector3::from(t_fixed) },
            PoseSpaceDto::Yaw4dof => PoseSpace::Yaw4DoF,
            PoseSpaceDto::Quat6dof => PoseSpace::Quat6DoF,
        }
    }

    pub fn from_space(space: &PoseSpace) -> Self {
        match *space {
            PoseSpace::YawOnly { t_fixed } => PoseSpaceDto::YawOnly { t_fixed: t_fixed.into() },
            PoseSpace::Yaw4DoF => PoseSpaceDto::Yaw4dof,
            PoseSpace::Quat6DoF => PoseSpaceDto::Quat6dof,
        }
    }
}

/// `t` is optional for yaw-only poses (the space fixes it).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quat_xyzw: Option<[f64; 4]>,
}

impl PoseDto {
    pub fn from_pose(pose: &Pose) -> Self {
        match *pose {
            Pose::YawOnly { theta, .. } => PoseDto { t: None, yaw: Some(theta), quat_xyzw: None },
            Pose::Yaw4DoF { t, theta } => PoseDto { t: Some(t.into()), yaw: Some(theta), quat_xyzw: None },
            Pose::Quat6DoF { t, q } => {
                let c = q.quaternion().coords;
                PoseDto { t: Some(t.into()), yaw: None, quat_xyzw: Some([c.x, c.y, c.z, c.w]) }
            }
        }
    }

    pub fn to_pose(&self, space: &PoseSpace, field: &str) -> Result<Pose, CliError> {
        let bad = |m: &str| Err(CliError::Input(format!("{field}: {m}")));
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match *space {
            PoseSpace::YawOnly { t_fixed } => {
                let Some(yaw) = self.yaw else { return bad("yaw-only pose needs `yaw`") };
                if self.quat_xyzw.is_some() {
                    return bad("yaw-only pose takes no `quat_xyzw`");
                }
                if let Some(t) = self.t {
                    if Vector3::from(t) != t_fixed {
                        return bad("`t` differs from the pose space's t_fixed");
                    }
                }
                if !yaw.is_finite() {
                    return bad("`yaw` is not finite");
                }
                Ok(Pose::yaw_only(yaw, t_fixed))
            }
            PoseSpace::Yaw4DoF => {
                let (Some(t), Some(yaw)) = (self.t, self.yaw) else { return bad("4DoF pose needs `t` and `yaw`") };
                if self.quat_xyzw.is_some() {
                    return bad("4DoF pose takes no `quat_xyzw`");
                }
                if !finite(&t) || !yaw.is_finite() {
                    return bad("pose has non-finite entries");
                }
                Ok(Pose::yaw4(t.into(), yaw))
            }
            PoseSpace::Quat6DoF => {
                let (Some(t), Some(q)) = (self.t, self.quat_xyzw) else { return bad("6DoF pose needs `t` and `quat_xyzw`") };
                if self.yaw.is_some() {
                    return bad("6DoF pose takes no `yaw`");
                }
                if !finite(&t) || !finite(&q) {
                    return bad("pose has non-finite entries");
                }
                Pose::quat6(t.into(), q).map_err(|e| CliError::core(field, e))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointDto {
    pub x3d: [f64; 3],
    pub x2d: [f64; 2],
    pub w2d: [f64; 2],
}

/// Overrides for [`SolverOptions`]; omitted fields keep their defaults.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverDto {
    pub delta_rel: Option<f64>,
    pub eps: Option<f64>,
    pub max_iter: Option<usize>,
    pub lambda_init: Option<f64>,
    pub num_subsets: Option<usize>,
    pub init_iters: Option<usize>,
}

impl SolverDto {
    pub fn apply(&self, mut o: SolverOptions) -> SolverOptions {
        o.delta_rel = self.delta_rel.unwrap_or(o.delta_rel);
        o.eps = self.eps.unwrap_or(o.eps);
        o.max_iter = self.max_iter.unwrap_or(o.max_iter);
        o.lambda_init = self.lambda_init.unwrap_or(o.lambda_init);
        o.num_subsets = self.num_subsets.unwrap_or(o.num_subsets);
        o.init_iters = self.init_iters.unwrap_or(o.init_iters);
        o
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McDto {
    pub iterations: Option<usize>,
    pub samples_per_iter: Option<usize>,
}

impl McDto {
    pub fn apply(&self, mut c: McConfig) -> McConfig {
        c.iterations = self.iterations.unwrap_or(c.iterations);
        c.samples_per_iter = self.samples_per_iter.unwrap_or(c.samples_per_iter);
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub format_version: u32,
    pub camera: CameraDto,
    pub pose_space: PoseSpaceDto,
    pub points: Vec<PointDto>,
    #[serde(default)]
    pub gt: Option<PoseDto>,
    #[serde(default)]
    pub solver: Option<SolverDto>,
    #[serde(default)]
    pub mc: Option<McDto>,
}

/// A validated scene.
pub struct Scene {
    pub set: CorrespondenceSet,
    pub space: PoseSpace,
    pub gt: Option<Pose>,
    pub solver: SolverOptions,
    pub mc: McConfig,
}

impl SceneFile {
    pub fn load(path: &Path) -> Result<Scene, CliError> {
        let f: SceneFile = read_json(path)?;
        check_version(f.format_version, "scene")?;
        f.validate()
    }

    pub fn validate(&self) -> Result<Scene, CliError> {
        let c = self.camera;
        let camera = Camera::new(c.fx, c.fy, c.cx, c.cy).map_err(|e| CliError::core("camera", e))?;
        let space = self.pose_space.to_space();
        let mut points = Vec::with_capacity(self.points.len());
        for (i, p) in self.points.iter().enumerate() {
            let corr = Correspondence::new(Vector3::from(p.x3d), Vector2::from(p.x2d), Vector2::from(p.w2d));
            if !corr.is_valid() {
                return Err(CliError::Input(format!("points[{i}]: entries must be finite and w2d non-negative")));
            }
            points.push(corr);
        }
        let set = CorrespondenceSet::new(points, camera);
        set.validate(&space).map_err(|e| CliError::core("points", e))?;
        let gt = self.gt.as_ref().map(|g| g.to_pose(&space, "gt")).transpose()?;
        let solver = self.solver.unwrap_or_default().apply(SolverOptions::default());
        solver.validate(set.len()).map_err(|e| CliError::core("solver", e))?;
        let mc = self.mc.unwrap_or_default().apply(McConfig::default());
        mc.validate().map_err(|e| CliError::core("mc", e))?;
        Ok(Scene { set, space, gt, solver, mc })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveOutput {
    pub format_version: u32,
    pub pose_space: PoseSpaceDto,
    pub pose: PoseDto,
    /// Tangent order: `[θ]`, `[t, θ]` or `[t, ω]`.
    pub covariance: Vec<Vec<f64>>,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    pub huber_delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeDto {
    pub center: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSummary {
    pub format_version: u32,
    pub rows: usize,
    pub iterations: usize,
    pub samples_per_iter: usize,
    pub l_pred: f64,
    pub effective_sample_size: f64,
    pub refit_fallbacks: usize,
    /// Yaw modes holding at least 5% of the mass; absent for 6DoF.
    #[serde(default)]
    pub modes: Option<Vec<ModeDto>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointGradDto {
    pub x3d: [f64; 3],
    pub x2d: [f64; 2],
    pub w2d: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossOutput {
    pub format_version: u32,
    pub l_tgt: f64,
    pub l_pred: f64,
    pub l_kl: f64,
    #[serde(default)]
    pub l_reg: Option<f64>,
    pub huber_delta: f64,
    pub effective_sample_size: f64,
    pub grads: Vec<PointGradDto>,
    /// `−∂c/∂w` at the target pose.
    pub weight_uncertainty: Vec<[f64; 2]>,
    /// `E[∂c/∂w]` under the sampled posterior.
    pub weight_discrimination: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckOutput {
    pub format_version: u32,
    /// `quadrature_kl` for yaw-only scenes, `robust_cost` otherwise.
    pub objective: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKindDto {
    Yaw4dof,
    Quat6dof,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySceneDto {
    pub n_points: Option<usize>,
    pub half_extent: Option<f64>,
    pub depth: Option<f64>,
    pub n_train: Option<usize>,
    pub n_val: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub symmetry: Option<usize>,
    pub space: Option<SpaceKindDto>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationDto {
    Softmax,
    Exp,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDto {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub lr_x3d: Option<f64>,
    pub lr_logits: Option<f64>,
    pub lr_log_scale: Option<f64>,
    pub momentum: Option<f64>,
    pub lr_final_fraction: Option<f64>,
    pub batch_size: Option<usize>,
    /// `monte_carlo`, `reprojection_only` or `monte_carlo+reg`.
    pub loss_mode: Option<String>,
    pub reg_weight: Option<f64>,
    pub reg_beta: Option<f64>,
    pub activation: Option<ActivationDto>,
    pub init_x3d_sigma: Option<f64>,
    pub init_log_scale: Option<f64>,
    pub eval_every: Option<usize>,
    /// Maximum gradient norm; 0 disables clipping.
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub mc: Option<McDto>,
    #[serde(default)]
    pub solver: Option<SolverDto>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfigFile {
    pub format_version: u32,
    #[serde(default)]
    pub scene: ToySceneDto,
    #[serde(default)]
    pub train: TrainDto,
}

impl ToyConfigFile {
    pub fn load(path: &Path) -> Result<(SceneSpec, TrainConfig), CliError> {
        let f: ToyConfigFile = read_json(path)?;
        check_version(f.format_version, "config")?;
        f.resolve()
    }

    pub fn resolve(&self) -> Result<(SceneSpec, TrainConfig), CliError> {
        let d = SceneSpec::default();
        let s = &self.scene;
        let spec = SceneSpec {
            n_points: s.n_points.unwrap_or(d.n_points),
            half_extent: s.half_extent.unwrap_or(d.half_extent),
            depth: s.depth.unwrap_or(d.depth),
            n_train: s.n_train.unwrap_or(d.n_train),
            n_val: s.n_val.unwrap_or(d.n_val),
            noise_sigma: s.noise_sigma.unwrap_or(d.noise_sigma),
            symmetry: s.symmetry.or(d.symmetry),
            space: match s.space {
                Some(SpaceKindDto::Yaw4dof) => SpaceKind::Yaw4DoF,
                Some(SpaceKindDto::Quat6dof) => SpaceKind::Quat6DoF,
                None => d.space,
            },
            ..d
        };
        spec.validate().map_err(|e| CliError::core("scene", e))?;

        let d = TrainConfig::default();
        let t = &self.train;
        let loss_mode = match &t.loss_mode {
            Some(m) => LossMode::parse(m).ok_or_else(|| CliError::Input(format!("train.loss_mode: unknown mode `{m}`")))?,
            None => d.loss_mode,
        };
        let cfg = TrainConfig {
            steps: t.steps.unwrap_or(d.steps),
            lr: t.lr.unwrap_or(d.lr),
            lr_x3d: t.lr_x3d.unwrap_or(d.lr_x3d),
            lr_logits: t.lr_logits.unwrap_or(d.lr_logits),
            lr_log_scale: t.lr_log_scale.unwrap_or(d.lr_log_scale),
            momentum: t.momentum.unwrap_or(d.momentum),
            lr_final_fraction: t.lr_final_fraction.unwrap_or(d.lr_final_fraction),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            mc: t.mc.unwrap_or_default().apply(d.mc),
            loss_mode,
            reg_weight: t.reg_weight.unwrap_or(d.reg_weight),
            reg: RegConfig { beta: t.reg_beta.unwrap_or(d.reg.beta), ..d.reg },
            solver: t.solver.unwrap_or_default().apply(d.solver),
            activation: match t.activation {
                Some(ActivationDto::Exp) => Activation::Exp,
                Some(ActivationDto::Softmax) => Activation::Softmax,
                None => d.activation,
            },
            init_x3d_sigma: t.init_x3d_sigma.unwrap_or(d.init_x3d_sigma),
            init_log_scale: t.init_log_scale.unwrap_or(d.init_log_scale),
            eval_every: t.eval_every.unwrap_or(d.eval_every),
            grad_clip: match t.grad_clip {
                Some(c) if c == 0.0 => None,
                Some(c) => Some(c),
                None => d.grad_clip,
            },
            exec: d.exec,
        };
        cfg.validate().map_err(|e| CliError::core("train", e))?;
        cfg.solver.validate(spec.n_points).map_err(|e| CliError::core("train.solver", e))?;
        Ok((spec, cfg))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub format_version: u32,
    pub x3d: Vec<[f64; 3]>,
    pub logits: Vec<[f64; 2]>,
    pub log_scale: [f64; 2],
    pub activation: ActivationDto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub format_version: u32,
    pub loss_mode: String,
    pub seed: u64,
    pub steps_run: usize,
    pub aborted_at: Option<usize>,
    pub median_rot_deg: f64,
    pub median_trans: f64,
    pub mean_rot_deg: f64,
    pub mean_trans: f64,
    pub eval_failures: usize,
    pub degenerate: bool,
    /// Median errors of the true shape with noise-matched weights.
    pub oracle_median_rot_deg: f64,
    pub oracle_median_trans: f64,
    /// Larger of the rotation and translation median-error ratios to the oracle.
    pub error_ratio: f64,
    /// Finished without abort or collapse, median rotation below 2° and
    /// median translation below 2% of the nominal depth.
    pub converged: bool,
}

/// One row of a training trace; NaN fields are written empty.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_tgt: Option<f64>,
    pub l_pred: Option<f64>,
    pub l_kl: Option<f64>,
    pub val_rot_deg: Option<f64>,
    pub val_trans: Option<f64>,
    #[serde(default)]
    pub grad_norm: Option<f64>,
}
