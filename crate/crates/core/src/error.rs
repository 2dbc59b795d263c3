use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    RawIo(#[from] std::io::Error),
    /// A text record could not be parsed; `line` is 1-based.
    #[error("malformed record at line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    /// A binary record could not be parsed; `offset` is the byte offset of the record.
    #[error("malformed record at byte offset {offset}: {msg}")]
    MalformedBytes { offset: u64, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of bounds: {0}")]
    Index(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::Invalid(format!($($arg)*)) };
}
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use invalid;
pub(crate) use shape_err;
