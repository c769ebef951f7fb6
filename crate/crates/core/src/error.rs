//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for an operation. Carries both shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A non-finite value (NaN or infinity) was produced or supplied.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid configuration (bad field value, impossible combination).
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse (empty input, out-of-range argument).
    #[error("usage error: {0}")]
    Usage(String),

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("checkpoint magic mismatch (not a checkpoint file)")]
    BadMagic,

    /// Checkpoint format version not supported by this build.
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    /// Checkpoint file ends mid-record.
    #[error("checkpoint truncated")]
    Truncated,

    /// Checkpoint CRC32 trailer does not match the payload.
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
