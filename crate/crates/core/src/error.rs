use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("step index {t} out of range 1..={max}")]
    StepIndex { t: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: [usize; 3],
        actual: [usize; 3],
    },

    #[error("user `{0}` is already registered")]
    DuplicateUser(String),

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("model not calibrated: {0}")]
    Uncalibrated(String),

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("theory check failed: {0}")]
    Theory(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 0 is reserved for success and 2 for a verification reject, which is
    /// not an error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Uncalibrated(_) | Error::Calibration(_) => 3,
            Error::Format(_) | Error::Checksum { .. } | Error::Json(_) | Error::Csv(_) => 4,
            Error::Provenance(_) => 5,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 6,
            Error::Io { .. } => 4,
            _ => 1,
        }
    }
}
