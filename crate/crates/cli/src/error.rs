//! One error type for the whole binary. `main` prints it on a single line
//! (inner newlines flattened) and exits nonzero, so failures stay
//! machine-parsable.

use std::path::PathBuf;
use thiserror::Error;
use warplab_core::checkpoint::CheckpointError;
use warplab_core::merge::MergeError;
use warplab_core::policy::PolicyError;
use warplab_core::trainer::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Merge(#[from] MergeError),
    #[error("{0}")]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Wrap a core validation error as a config error.
    pub fn from_core(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
