use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("window length {length} exceeds series length {rows}")]
    WindowTooLong { length: usize, rows: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("non-numeric value {value:?} at row {row}, column `{column}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("attack range [{start}, {end}) exceeds series length {rows}")]
    RangeOverflow { start: usize, end: usize, rows: usize },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("trajectory mismatch: {0}")]
    Trajectory(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
