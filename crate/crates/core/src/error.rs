use std::path::PathBuf;

use gssm_autodiff::checkpoint::CheckpointError;
use gssm_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown environment {0:?}; expected cartpole or acrobot")]
    UnknownEnv(String),
    #[error("non-finite state {state:?} after step {step}")]
    NonFinite { step: usize, state: Vec<f64> },
    #[error("invalid action index {0}; expected 0, 1 or 2")]
    InvalidAction(usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::UnknownEnv(_) => "config",
            Error::NonFinite { .. } | Error::Numeric(_) | Error::Autodiff(_) => "numeric",
            Error::InvalidAction(_) | Error::Invalid(_) => "invalid-input",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } | Error::Csv(_) => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Lets core computations run inside autodiff gradient checks.
impl From<Error> for AutodiffError {
    fn from(e: Error) -> Self {
        match e {
            Error::Autodiff(inner) => inner,
            other => AutodiffError::Invalid {
                op: "gssm-core",
                msg: other.to_string(),
            },
        }
    }
}
