use thiserror::Error;

pub type Result<T> = std::result::Result<T, CdiraError>;

#[derive(Debug, Error)]
pub enum CdiraError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("clustering error: {0}")]
    Cluster(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CdiraError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CdiraError::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CdiraError::InvalidArgument(msg.into())
    }
}
