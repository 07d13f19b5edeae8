use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad magic, unsupported version or truncated payload.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Matrix and manifest disagree, or labels fall outside their range.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// NaN or infinite entries.
    #[error("data error: {0}")]
    Data(String),

    #[error("row {row} has norm {norm:e}, cannot normalize")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A mathematical precondition failed (empty centers, bad label, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A search state with no active center.
    #[error("degenerate search state: {0}")]
    DegenerateState(String),

    /// Numerical degeneracy such as constant score vectors or zero vectors.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {msg}")]
    Toml { path: PathBuf, msg: String },

    #[error("csv error in {path}: {msg}")]
    Csv { path: PathBuf, msg: String },

    /// Wraps an error with the pipeline stage it came from.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
