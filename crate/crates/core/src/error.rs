use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite value encountered at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("warm stack misclassifies sample {sample} (margin {margin:e})")]
    Misclassified { sample: usize, margin: f64 },

    #[error("degenerate initialization: {0}")]
    Degenerate(String),

    #[error("infeasible specification: {0}")]
    Infeasible(String),

    #[error("duplicate probe points")]
    DuplicateProbe,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
