use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("insufficient history: need {needed} values, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("population exhausted for {country} on day {day}")]
    PopulationExhausted { country: String, day: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },
    #[error("covariance matrix not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
