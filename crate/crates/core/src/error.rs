use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mismatched group order: {left} vs {right}")]
    MismatchedOrder { left: u32, right: u32 },
    #[error("divergent tail: {0}")]
    DivergentTail(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("no result for this class: {0}")]
    Unresolved(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
