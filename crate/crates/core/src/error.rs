use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    NodeShape { node: usize, op: &'static str, detail: String },

    #[error("input `{0}` is not bound")]
    Unbound(String),

    #[error("backward called before forward")]
    NotEvaluated,

    #[error("graph is not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("non-finite values at {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("malformed {what} file {path}: {detail}")]
    Format { what: &'static str, path: PathBuf, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), cause: source }
    }
}
