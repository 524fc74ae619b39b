use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller broke a documented precondition.
    #[error("usage error: {0}")]
    Usage(String),
    /// Invalid configuration or model definition.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("chain does not mix within {cap} steps at epsilon = {epsilon}")]
    NonMixing { epsilon: f64, cap: u64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}
