use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("objective is not finite at the evaluated point")]
    NonFiniteObjective,
    #[error("optimization diverged in stage `{0}`")]
    OptimizationDiverged(String),

    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("degenerate camera motion: {0}")]
    DegenerateMotion(String),
    #[error("rays are nearly parallel (angle {angle:.3e} rad)")]
    DegenerateRays { angle: f64 },
    #[error("no timestep shares enough triangulated features to be chained")]
    NoChainableTimesteps,
    #[error("no usable seed pair for structure from motion")]
    SeedPairNotFound,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("need at least {needed} detected coordinates, got {got}")]
    InsufficientDetections { needed: usize, got: usize },
    #[error("pose is ambiguous: two solutions with equal residual differ by {distance:.3e}")]
    AmbiguousPose { distance: f64 },
    #[error("inverse kinematics did not converge (residual {residual:.3e})")]
    IkNotConverged { residual: f64, best: Vec<f64> },
    #[error("joint inference did not converge")]
    InferenceNotConverged,

    #[error("joint {joint} value {value} outside limits [{lo}, {hi}]")]
    JointLimitViolation { joint: usize, value: f64, lo: f64, hi: f64 },
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("i/o: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
