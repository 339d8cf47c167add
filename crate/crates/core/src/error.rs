use thiserror::Error;

/// Errors raised anywhere in the protocol stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// A numerical routine failed or produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// An internal invariant between cooperating calls was broken.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Malformed tabular or binary input.
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
