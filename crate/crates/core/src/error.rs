use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape { node: usize, op: &'static str, detail: String },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("solver diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// Invalid user configuration; `path` names the offending field.
    #[error("invalid configuration at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { path: path.into(), detail: detail.into() }
    }

    /// True for failures caused by numerics rather than inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}
