use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that cannot be combined, or a tensor that violates an op's
    /// layout requirements.
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("chip spec error: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
