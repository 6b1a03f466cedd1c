use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("operation supports dimension {supported} only, got {got}")]
    UnsupportedDimension { supported: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("measure has no atoms")]
    EmptyMeasure,

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("covariance is not symmetric positive semidefinite: {0}")]
    InvalidCovariance(String),

    #[error("covariance is singular")]
    SingularCovariance,

    #[error("sinkhorn did not converge after {iterations} iterations (marginal violation {gap:e})")]
    IterationLimit { iterations: usize, gap: f64 },

    #[error("drift model does not provide `{0}`")]
    MissingCapability(&'static str),

    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("{what} = {value} out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: String,
        range: String,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
