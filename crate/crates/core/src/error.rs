use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time grid mismatch: expected {expected} steps, got {found}")]
    GridMismatch { expected: usize, found: usize },

    #[error("expectation has imaginary residue {residue:e}; operator is not Hermitian")]
    NonHermitian { residue: f64 },

    #[error("amplitude {value} on {axis}{index} exceeds bound {bound}")]
    AmplitudeOutOfBounds {
        axis: char,
        index: usize,
        value: f64,
        bound: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("metadata file missing: {0}")]
    MissingMeta(PathBuf),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed data at row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("non-finite loss at sample {index}")]
    NonFiniteLoss { index: usize },

    #[error("training diverged at epoch {epoch}: loss {loss:e} vs initial {initial:e}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    #[error("all {restarts} optimization restarts failed: {diagnostics}")]
    OptimizationFailed { restarts: usize, diagnostics: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by arithmetic failure rather than bad input or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonHermitian { .. }
                | Error::NonFiniteLoss { .. }
                | Error::Diverged { .. }
                | Error::OptimizationFailed { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
