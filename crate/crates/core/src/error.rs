use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor axis did not have the size an operation expected.
    #[error("dimension error on {axis}: expected {expected}, got {got}")]
    Dimension {
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric argument fell outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible allocation: {0}")]
    Infeasible(String),

    /// The pruned graph no longer has matching producer/consumer widths.
    #[error("graph consistency error: {0}")]
    Consistency(String),

    #[error("bad magic: expected \"DSHA\"")]
    BadMagic,

    #[error("version mismatch: file has format version {found}, reader supports {supported}")]
    VersionMismatch { found: u16, supported: u16 },

    #[error("truncated model file: {0}")]
    Truncated(String),

    #[error("malformed descriptor: {0}")]
    Descriptor(String),

    #[error("profiler busy: another profiling run is in progress")]
    ProfilerBusy,

    #[error("unknown op id {0:?}")]
    UnknownOp(String),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(axis: impl Into<String>, expected: usize, got: usize) -> Error {
    Error::Dimension {
        axis: axis.into(),
        expected,
        got,
    }
}
