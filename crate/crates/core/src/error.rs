use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
///
/// Variants are grouped by what went wrong rather than where, so the CLI can
/// map them onto its exit codes with [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),

    #[error("mesh is not watertight: {count} open edge(s), e.g. {sample:?}")]
    NotWatertight { count: usize, sample: Vec<(u32, u32)> },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("object not visible from view {0}")]
    EmptyMeasurement(usize),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("bsdf fit failed: {0}")]
    Fit(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Usage,
            Error::Numerical(_) | Error::Fit(_) | Error::Calibration(_) => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
