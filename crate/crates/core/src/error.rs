use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row}, threshold {threshold:e})")]
    NotPositiveDefinite { row: usize, pivot: f64, threshold: f64 },

    #[error("eigen-decomposition did not converge within {0} sweeps")]
    NoConvergence(usize),

    #[error("divergent geometry: {0}")]
    DivergentGeometry(String),

    #[error("step too large: energy rose by {increase:e} in one step")]
    StepTooLarge { increase: f64 },

    #[error("singular geometry: {0}")]
    SingularGeometry(String),

    #[error("ensemble is empty or too small ({0} frames)")]
    EmptyEnsemble(usize),

    #[error("quadrature needs {0} integration dimensions, at most 3 are supported")]
    DimensionTooLarge(usize),

    #[error("probe generation produced a zero vector {0} times in a row")]
    ZeroVector(usize),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch { expected: usize, got: usize, context: String },

    #[error("covariance correction requested but no force residual supplied")]
    MissingResidual,

    #[error("empty batch")]
    EmptyBatch,

    #[error("target store does not match training data: {0}")]
    StoreMismatch(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("non-finite state at step {step}; last states: {last_states:?}")]
    NonFiniteState { step: usize, last_states: Vec<Vec<f64>> },

    #[error("trajectory of length {len} is too short for lag {lag}")]
    TrajectoryTooShort { len: usize, lag: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn mismatch(expected: usize, got: usize, context: impl Into<String>) -> Self {
        Error::DimensionMismatch { expected, got, context: context.into() }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::NoConvergence(_)
                | Error::DivergentGeometry(_)
                | Error::StepTooLarge { .. }
                | Error::SingularGeometry(_)
                | Error::ZeroVector(_)
                | Error::NonFiniteLoss(_)
                | Error::NonFiniteState { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
