use std::path::PathBuf;

/// Library error type. Every fallible public operation returns one of these
/// variants rather than panicking; panics are reserved for internal logic bugs.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("scene contains no gaussians")]
    EmptyScene,

    #[error("point set is empty: {0}")]
    EmptyPointSet(String),

    #[error("mesh is unusable: {0}")]
    BadMesh(String),

    #[error("solver stalled: residual {residual:.3e} after {iterations} iterations")]
    SolverStalled { residual: f64, iterations: usize },

    #[error("non-finite {quantity} at iteration {iteration}: {detail}")]
    NonFinite {
        quantity: String,
        iteration: usize,
        detail: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
