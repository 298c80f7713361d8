use std::path::{Path, PathBuf};

use ecvit_tensor::TensorError;
use thiserror::Error;

use crate::config::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config: {0}")]
    Config(String),

    #[error("invalid config: {}", join(.0))]
    InvalidConfig(Vec<Violation>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: expected {expected}, found {actual} bytes")]
    Format {
        path: PathBuf,
        expected: String,
        actual: u64,
    },

    #[error("{0}")]
    Contract(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|v| v.0.as_str()).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
