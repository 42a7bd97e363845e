use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth} <= {z_min})")]
    BehindCamera { depth: f64, z_min: f64 },
    #[error("degenerate correspondence set: {0}")]
    DegenerateSet(String),
    #[error("every correspondence projects behind the camera")]
    AllPointsInvalid,
    #[error("normal equations are singular even after damping escalation")]
    SingularSystem,
    #[error("no valid pose hypothesis among {0} subsets")]
    NoValidHypothesis(usize),
    #[error("weighted covariance is rank deficient")]
    RankDeficientFit { location: nalgebra::Vector3<f64> },
    #[error("fixed-point iteration failed to contract after {iterations} iterations")]
    FitDiverged { iterations: usize },
    #[error("not enough effective samples for fitting ({effective:.3} < {required})")]
    InsufficientSamples { effective: f64, required: f64 },
    #[error("all importance weights are zero")]
    AllWeightsZero,
    #[error("proposal refit collapsed: {0}")]
    ProposalCollapse(String),
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("pose space mismatch: {0}")]
    SpaceMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    /// Whether the error is a numerical or degeneracy failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, Error::InvalidInput(_) | Error::SpaceMismatch(_))
    }
}
