use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: TensorError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Self::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Short category name, used for process exit codes and log lines.
    pub fn category(&self) -> &'static str {
        match self {
            Self::Tensor(_) => "tensor",
            Self::Io { .. } => "io",
            Self::Format { .. } => "format",
            Self::Config(_) => "config",
            Self::Checkpoint(_) => "checkpoint",
            Self::Invalid(_) => "input",
            Self::Diverged { .. } => "diverged",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
