use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::DiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("declared extents {extents:?} overflow the addressable size")]
    ExtentOverflow { extents: Vec<u64> },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(u64),
    #[error("{what}: expected {expected}, found {found}")]
    ExtentMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("class {class} has {available} clips, episode needs {needed}")]
    InsufficientClips {
        class: u32,
        available: usize,
        needed: usize,
    },
    #[error("only {available} classes available, episode needs {needed}")]
    InsufficientClasses { available: usize, needed: usize },
    #[error("empty support set")]
    EmptySupport,
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient { .. }
                | Error::NonFiniteLoss
                | Error::Diff(DiffError::NonFinite { .. })
                | Error::Diff(DiffError::NonFiniteLoss { .. })
        )
    }

    /// True for file-system and file-format errors.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::Truncated { .. }
                | Error::ExtentOverflow { .. }
                | Error::TrailingBytes(_)
                | Error::Manifest { .. }
                | Error::MissingParam(_)
        )
    }
}
