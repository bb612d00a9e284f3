use thiserror::Error;

pub type Result<T> = std::result::Result<T, M2dsError>;

#[derive(Error, Debug)]
pub enum M2dsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("archive error: {0}")]
    Archive(String),
}

impl M2dsError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        M2dsError::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        M2dsError::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        M2dsError::Shape(msg.into())
    }
}
