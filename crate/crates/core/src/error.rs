use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DapaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DapaError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("ingestion error in session '{session}': {message}")]
    Ingestion { session: String, message: String },

    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl DapaError {
    pub fn class(&self) -> ErrorClass {
        match self {
            DapaError::Dimension(_) | DapaError::Usage(_) | DapaError::Config(_) => {
                ErrorClass::Usage
            }
            DapaError::Lookup(_)
            | DapaError::Ingestion { .. }
            | DapaError::Format { .. }
            | DapaError::Consistency(_)
            | DapaError::Checkpoint(_)
            | DapaError::Io { .. } => ErrorClass::Data,
            DapaError::NonFinite(_) => ErrorClass::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DapaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        DapaError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
