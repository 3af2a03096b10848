use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error(transparent)]
    Core(#[from] inplace_abn::Error),
    #[error("serialization: {0}")]
    Serialize(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for failed checks, 2 for bad arguments or inputs, 3 for I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) | CliError::Diverged { .. } => 1,
            CliError::Usage(_) | CliError::Core(_) => 2,
            CliError::Io { .. } | CliError::Dataset { .. } | CliError::Serialize(_) => 3,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Serialize(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Serialize(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
