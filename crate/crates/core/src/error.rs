use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss has no unmasked positions")]
    EmptyLoss,

    #[error("graph error: {0}")]
    Graph(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("context capacity exceeded: need {needed} positions, context holds {capacity}")]
    Capacity { needed: usize, capacity: usize },

    #[error("out-of-vocabulary fragment {fragment:?}")]
    Tokenize { fragment: String },

    #[error("structure error: {0}")]
    Structure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at stage {stage}, epoch {epoch}: {detail}")]
    Divergence {
        stage: usize,
        epoch: usize,
        detail: String,
    },

    #[error("checkpoint selection error: {0}")]
    Selection(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Selection(_) => 2,
            Error::Data(_) | Error::Tokenize { .. } | Error::Checkpoint { .. } | Error::Json(_) | Error::Csv(_) => 3,
            Error::Capacity { .. } => 4,
            Error::Divergence { .. } | Error::NonFinite { .. } => 5,
            _ => 1,
        }
    }
}
