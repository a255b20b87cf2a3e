use std::fmt;
use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the toolkit.
#[derive(Debug)]
pub enum Error {
    /// A tensor operation received incompatible shapes or extents.
    Shape(String),
    /// Invalid configuration value, unknown config key, or bad CLI usage.
    Config(String),
    /// Dataset ingestion, container parsing, or split arithmetic failure.
    Data(String),
    /// Underlying I/O failure.
    Io(io::Error),
    /// Non-finite loss or gradient encountered during training.
    Diverged(String),
}

impl Error {
    /// Process exit code for the CLI: 2 usage/config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Diverged(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Diverged(msg) => write!(f, "numeric divergence: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}

macro_rules! data_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Data(format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}

pub(crate) use {config_err, data_err, shape_err};
