use thiserror::Error;

/// Errors raised by the linear algebra kernels, the protocols and the stream readers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("certificate failed after reseeding: {0}")]
    RetryWithNewSeed(String),
    #[error("stream replay mismatch: {0}")]
    StreamReplay(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Input(_)
            | Error::NonFinite { .. }
            | Error::Parse { .. }
            | Error::Io(_) => 2,
            Error::Protocol(_)
            | Error::Internal(_)
            | Error::RetryWithNewSeed(_)
            | Error::StreamReplay(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
