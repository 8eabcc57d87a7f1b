use std::io;

use thiserror::Error;

pub type Result<T, E = CignError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CignError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape { context: String, expected: String, actual: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("starved node: {0}")]
    StarvedNode(String),

    #[error("routing invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },

    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CignError {
    pub fn shape(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        CignError::Shape { context: context.into(), expected: expected.to_string(), actual: actual.to_string() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        CignError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 = configuration, 3 = data (datasets and checkpoints), 4 = diverged run,
    /// 1 = anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CignError::Config(_) | CignError::Shape { .. } | CignError::Domain(_) => 2,
            CignError::Format { .. } | CignError::Checkpoint(_) | CignError::Io { .. } => 3,
            CignError::Diverged { .. } | CignError::NonFinite(_) => 4,
            CignError::Usage(_) | CignError::Invariant(_) | CignError::StarvedNode(_) | CignError::Json(_) => 1,
        }
    }
}
