use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes shared by every module.
///
/// The CLI maps these onto process exit codes, so new variants must pick a
/// class in [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown label {label}")]
    UnknownLabel { label: u32 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("data integrity: {0}")]
    DataIntegrity(String),

    #[error("rank deficient: need rank {needed}, data has rank {rank}")]
    RankDeficient { needed: usize, rank: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse failure class, used for exit-status mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    DataIntegrity,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidInput(_) | Error::UnknownLabel { .. } => ErrorClass::Usage,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                ErrorClass::Usage
            }
            Error::DimensionMismatch { .. }
            | Error::DataIntegrity(_)
            | Error::Io { .. }
            | Error::Json { .. } => ErrorClass::DataIntegrity,
            Error::RankDeficient { .. } | Error::NonFiniteLoss { .. } | Error::Numerical(_) => {
                ErrorClass::Numerical
            }
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

pub(crate) fn ensure_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
