//! Crate-wide error type and the exit-code taxonomy used by the CLI.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or unsupported file contents (WAV codec, manifest, model file).
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Audio at a different rate than the configured single run rate.
    #[error(
        "sample rate mismatch in {path}: got {got} Hz, expected {expected} Hz (no resampling)"
    )]
    RateMismatch {
        path: PathBuf,
        got: u32,
        expected: u32,
    },

    /// A caller violated an operation precondition or shape contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Model file failed its checksum.
    #[error("integrity error in {path}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Integrity {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    /// Model file written by an unknown format version.
    #[error("unsupported model format version {found:?} in {path}")]
    Version { path: PathBuf, found: String },

    /// Attempt to update a frozen parameter tensor.
    #[error("frozen parameter '{0}' cannot be updated")]
    FrozenViolation(String),

    /// Non-finite values during training or inference.
    #[error("numeric fault: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Exit code for the CLI: 0 ok, 2 usage/contract, 3 i/o, 4 format, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::FrozenViolation(_) => 2,
            Error::Io { .. } => 3,
            Error::Format { .. }
            | Error::RateMismatch { .. }
            | Error::Integrity { .. }
            | Error::Version { .. } => 4,
            Error::Numeric(_) => 5,
        }
    }
}
