use std::fmt;
use std::path::Path;

/// Failure classes that map onto process exit codes.
#[derive(Debug)]
pub enum Error {
    /// Bad configuration, flags or input files (exit 2).
    Config(String),
    /// Anything that went wrong while running (exit 3).
    Runtime(String),
    /// NaN/Inf produced during computation (exit 4).
    Numeric(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Runtime(_) => 3,
            Error::Numeric(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Error::Runtime(format!("{}: {e}", path.display()))
    }

    /// Parse failures in input files are the caller's fault.
    pub fn parse(path: &Path, msg: impl fmt::Display) -> Self {
        Error::Config(format!("{}: {msg}", path.display()))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Runtime(m) => write!(f, "runtime error: {m}"),
            Error::Numeric(m) => write!(f, "numeric fault: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<mogo_core::Error> for Error {
    fn from(e: mogo_core::Error) -> Self {
        if e.is_numeric() {
            Error::Numeric(e.to_string())
        } else {
            Error::Runtime(e.to_string())
        }
    }
}
