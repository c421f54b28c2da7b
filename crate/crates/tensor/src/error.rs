use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no valid target cells")]
    NoValidCells,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::InvalidShape(msg.into()))
}
