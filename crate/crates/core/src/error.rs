use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0} degrees is not on the 15-degree yaw grid")]
    InvalidPose(i32),
    #[error("invalid pose index {0} (expected 0..13)")]
    InvalidIndex(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation protocol error: {0}")]
    Protocol(String),
    #[error("non-finite loss at iteration {iteration}: {what}")]
    NonFinite { iteration: u64, what: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Nn(#[from] lbgan_nn::NnError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Error::Format { path: path.into(), message: message.to_string() }
    }

    /// True for errors caused by bad user-supplied configuration or requests
    /// rather than by a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidPose(_)
                | Error::InvalidIndex(_)
                | Error::InvalidParameter(_)
                | Error::InvalidRequest(_)
                | Error::Config(_)
        )
    }
}
