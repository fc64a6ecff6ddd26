use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A forward or backward pass produced NaN/Inf, or training diverged.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract was violated (backward on a non-scalar, bad permutation, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// An index (class label, partner id) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Invalid configuration: counts, chaining, protocol, CLI arguments.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed on-disk data (PNM headers, checkpoints, reports).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for configuration problems,
    /// 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}

macro_rules! err_fmt {
    ($kind:ident, $($arg:tt)*) => {
        $crate::error::Error::$kind(format!($($arg)*))
    };
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}

pub(crate) use {bail, err_fmt};
