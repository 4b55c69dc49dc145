use ndgrad::NdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] NdError),
    #[error("sequence of length {len} exceeds context length {ctx_len}")]
    SequenceTooLong { len: usize, ctx_len: usize },
    #[error("models are not parameter compatible: {0}")]
    Incompatible(String),
    #[error("corpus capacity exceeded: {0}")]
    Capacity(String),
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;
