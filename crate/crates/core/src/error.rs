use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("task {index}: {source}")]
    InTask {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    Diverged { epoch: usize, what: &'static str },

    #[error("input {value} outside the spline knot span [{lo}, {hi}]")]
    OutOfSpan { value: f64, lo: f64, hi: f64 },

    #[error("IDX stream has bad magic {0:#010x}")]
    BadMagic(u32),

    #[error("IDX stream truncated: expected {expected} bytes, found {found}")]
    TruncatedStream { expected: usize, found: usize },

    #[error("IDX stream has {0} trailing bytes")]
    TrailingBytes(usize),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing data file {}", .0.display())]
    MissingData(PathBuf),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips `InTask`/`Context` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::InTask { source, .. } | Error::Context { source, .. } => source.root(),
            e => e,
        }
    }
}
