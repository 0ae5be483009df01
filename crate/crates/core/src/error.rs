use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The variants are grouped by how a caller should react to them: input
/// validation problems (`Dimension`, `Parameter`, `Domain`, `Data`,
/// `Config`, `Fit`), storage problems (`Io`, `Format`) and broken internal
/// invariants (`Invariant`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("linear calibration fit failed on axis {axis}: {reason}")]
    Fit { axis: usize, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
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

    /// Wraps `self` with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code for this error class: 2 for configuration and
    /// validation problems, 3 for storage problems, 4 for invariant breaches.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Parameter(_)
            | Error::Domain(_)
            | Error::Data(_)
            | Error::Config(_)
            | Error::Fit { .. } => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Invariant(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
