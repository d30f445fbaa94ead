use std::path::PathBuf;

use thiserror::Error;

use crate::baselines::LinearDeModel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {what} {id} >= {bound}")]
    Index {
        what: &'static str,
        id: usize,
        bound: usize,
    },

    #[error("oracle lacks capability: {0}")]
    Capability(&'static str),

    #[error("invalid argument: {0}")]
    Spec(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        /// Parameters after the last epoch whose loss was finite.
        checkpoint: Box<LinearDeModel>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
