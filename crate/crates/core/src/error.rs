use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not fit together. `node` names the tape node (or
    /// model site) where the mismatch was detected, when known.
    #[error("shape error{}: {msg}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
    Shape { node: Option<usize>, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error in {path} at byte offset {offset}: {msg}")]
    Format { path: PathBuf, offset: u64, msg: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape { node: None, msg: msg.into() }
    }

    /// Attaches a node id to a shape error that does not carry one yet.
    pub(crate) fn at_node(self, id: usize) -> Self {
        match self {
            Error::Shape { node: None, msg } => Error::Shape { node: Some(id), msg },
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
