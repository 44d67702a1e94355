use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the pipeline stages and query operations.
///
/// Row-level ingest problems are not errors in this sense: they are
/// returned as data (`IngestError`) next to whatever parsed cleanly.
#[derive(Debug, Error)]
pub enum AlmanacError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("missing table `{table}` in {dir}")]
    MissingTable { table: String, dir: PathBuf },

    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    #[error("dangling reference: {0}")]
    DanglingReference(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("district {district} is ineligible: {reason}")]
    Ineligible { district: String, reason: String },

    #[error("insufficient pool: {0}")]
    InsufficientPool(String),

    #[error("unsupported schema version {found:?} (expected {expected:?})")]
    SchemaVersion { found: String, expected: String },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("store format: {0}")]
    StoreFormat(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl AlmanacError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        AlmanacError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        AlmanacError::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = AlmanacError> = std::result::Result<T, E>;
