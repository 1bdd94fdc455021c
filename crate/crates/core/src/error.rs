use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("network too small: {0} station(s), at least 2 required")]
    NetworkTooSmall(usize),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("feature `{0}` is constant over the training split")]
    ConstantFeature(String),
    #[error("split `{name}` has {len} hours, needs at least {needed}")]
    SplitTooShort {
        name: &'static str,
        len: usize,
        needed: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("unstable simulation at step {step}: outflow coefficient {outflow:.6} at station {station}")]
    Stability {
        step: usize,
        station: usize,
        outflow: f64,
    },
    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad files or config) rather
    /// than a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidCoordinate(_)
                | Error::DegenerateGeometry(_)
                | Error::NetworkTooSmall(_)
                | Error::Schema(_)
                | Error::Config(_)
                | Error::ConstantFeature(_)
                | Error::SplitTooShort { .. }
                | Error::Shape(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
