use std::io;
use std::path::PathBuf;

/// Errors raised anywhere in the engine, the data pipeline or the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in field `{field}`: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Dimension(_) => 1,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::NonFinite(_) => 2,
            Error::CheckFailed(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}
pub(crate) use {config_err, data_err, dim_err};
