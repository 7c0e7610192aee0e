use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("malformed parameter blob: {0}")]
    Blob(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
