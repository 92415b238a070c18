//! Error types shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-binary value {0} (expected exactly -1.0 or +1.0)")]
    NonBinaryValue(f32),

    #[error("logical length mismatch: lhs {lhs}, rhs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: String, got: String },

    #[error("unsupported format version {0}")]
    VersionMismatch(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("layer {0} cannot be packed for deployment")]
    IncompatibleLayer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
