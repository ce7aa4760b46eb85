use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Wrong magic bytes, unsupported version, bad checksum or malformed header.
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must agree (e.g. image and label counts) do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// The file ended before the declared payload was read.
    #[error("truncated input: {0}")]
    Truncation(String),

    #[error("insufficient data for class {class}: need {needed}, have {available}")]
    InsufficientData {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Wraps an error with the run cell it occurred in.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
