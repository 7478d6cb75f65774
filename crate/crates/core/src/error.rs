use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = C2eError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum C2eError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (failing pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical divergence at step {step:?}, layer {layer:?}: {detail}")]
    Divergence {
        step: Option<u64>,
        layer: Option<usize>,
        detail: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path:?}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl C2eError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        C2eError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        C2eError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            C2eError::Divergence { .. }
            | C2eError::NotPositiveDefinite { .. }
            | C2eError::Evaluation(_) => 3,
            C2eError::Io { .. }
            | C2eError::Image { .. }
            | C2eError::Csv(_)
            | C2eError::Format(_)
            | C2eError::Ingest(_) => 4,
            _ => 2,
        }
    }
}
