use std::path::PathBuf;

use minitensor::TensorError;

use crate::schedulers::Family;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("expected a {expected:?} model or time, got {got:?}")]
    FamilyMismatch { expected: Family, got: Family },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("episode format: {0}")]
    Format(#[from] crate::episode::FormatError),
    #[error("config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
