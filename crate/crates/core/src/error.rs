use thiserror::Error;

/// Errors produced by the calibration library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// Cholesky factorization met a non-positive pivot (1-based index).
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    /// A kernel matrix could not be factorized even after the nugget was added.
    #[error("ill-conditioned kernel matrix (pivot {pivot})")]
    IllConditioned { pivot: usize },

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("model kind mismatch: fitted as {fitted}, requested {requested}")]
    KindMismatch {
        fitted: &'static str,
        requested: &'static str,
    },

    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("simulator error: {0}")]
    Simulator(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Whether the error came from a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::IllConditioned { .. }
                | Error::OptimizationFailed(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
