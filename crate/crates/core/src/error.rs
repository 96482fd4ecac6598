use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] NumError),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Shape,
    Numeric,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Io(_) | Error::Format(_) => ErrorCategory::Io,
            Error::Shape(_) => ErrorCategory::Shape,
            Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Tensor(NumError::NonFinite { .. }) => ErrorCategory::Numeric,
            Error::Tensor(_) => ErrorCategory::Shape,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
