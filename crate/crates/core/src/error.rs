use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row} (line {line}): {message}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        line: usize,
        message: String,
    },

    #[error("{path}: timestamps not strictly increasing at row {row} (line {line})")]
    NonMonotonic {
        path: PathBuf,
        row: usize,
        line: usize,
    },

    #[error("trading day {date} has {count} five-minute bars, expected 48")]
    IncompleteDay { date: chrono::NaiveDate, count: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("series too short: {len} observations, need at least {min}")]
    SeriesTooShort { len: usize, min: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("episode already finished")]
    EpisodeDone,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
