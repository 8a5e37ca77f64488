use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("insufficient samples: {op} needs at least {needed} rows, got {got}")]
    InsufficientSamples {
        op: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{stage} diverged at epoch {epoch}: loss is not finite")]
    Divergence { stage: &'static str, epoch: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: u64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input (as opposed to a numeric or
    /// runtime failure during an otherwise valid computation).
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Dimension(_)
            | Error::InsufficientSamples { .. }
            | Error::Usage(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Io { .. } => true,
            Error::NonFinite(_) | Error::Divergence { .. } => false,
        }
    }
}
