//! Crate-wide error type. Variants map onto the CLI exit-code contract.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes disagree with an operation's contract.
    Dimension(String),
    /// An argument value is outside its legal range.
    Parameter(String),
    /// An API was called against its documented contract.
    Contract(String),
    /// A forward operation produced NaN or Inf from finite inputs.
    Numeric(String),
    /// Dataset bytes are malformed or fail their checksum.
    Data(String),
    /// Training diverged.
    Training(String),
    /// Run configuration is missing or invalid.
    Config(String),
    /// Filesystem failure.
    Io(String),
    /// A verification command found a failing block.
    CheckFailed(String),
}

impl Error {
    /// Exit code contract: 0 success, 2 config error, 3 I/O error,
    /// 4 training divergence, 5 check failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Parameter(_)
            | Error::Contract(_)
            | Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) | Error::Training(_) => 4,
            Error::CheckFailed(_) => 5,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
