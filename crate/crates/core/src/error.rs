use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate out of range: lat={lat}, lon={lon}")]
    CoordinateRange { lat: f64, lon: f64 },

    #[error("grid id {0} outside [0, 64799]")]
    GridIdRange(i64),

    #[error("grid cell ({lat_floor}, {lon_floor}) outside the 1-degree lattice")]
    CellRange { lat_floor: i32, lon_floor: i32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("transient network failure: {0}")]
    Transient(String),

    #[error("malformed API response: {0}")]
    Protocol(String),

    #[error("environment: {0}")]
    Environment(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("join error: {0}")]
    Join(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("horizon error: {0}")]
    Horizon(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("feature contract violated: {0}")]
    FeatureContract(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("invalid artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn artifact(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            message: message.into(),
        }
    }
}
