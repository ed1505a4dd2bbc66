use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("backward requires a completed forward pass")]
    NotForwarded,
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("unsupported kernel size {0:?}; only 3x3 kernels are supported")]
    KernelSize(Vec<usize>),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("singular normal matrix: {0}")]
    Singular(String),
    #[error("step size underflow at t = {0}")]
    StepUnderflow(f64),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("incompatible configuration: {0}")]
    Config(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch in {path}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },
    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures that indicate a damaged or incompatible file on disk.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            Error::Version { .. } | Error::Checksum { .. } | Error::Corrupt { .. } | Error::Json { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
