use std::io;

use crate::diff::checkpoint::CheckpointError;
use crate::diff::DiffError;
use crate::graph::{GraphError, JsonlError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("numeric: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>) -> impl FnOnce(io::Error) -> Error {
        let context = context.into();
        move |source| Error::Io { context, source }
    }

    /// Process exit status: 2 for bad input, 3 for numerical failure, 4 for bad configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 4,
            Error::Diverged { .. } | Error::Numeric(_) => 3,
            Error::Diff(DiffError::NonFinite { .. } | DiffError::Nondeterministic { .. }) => 3,
            _ => 2,
        }
    }
}
