use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid resolution: n_side must be a positive power of two, got {0}")]
    InvalidResolution(u32),

    #[error("pixel index {index} out of range (grid has {len} pixels)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("grid mismatch: expected n_side {expected}, got {got}")]
    GridMismatch { expected: u32, got: u32 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt stream at byte {offset}: {reason}")]
    CorruptStream { offset: usize, reason: String },

    #[error("model digest mismatch: stream was produced by a different checkpoint")]
    DigestMismatch,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("curves share no quality overlap")]
    IncomparableCurves,

    #[error("training diverged: non-finite loss at step {0}")]
    Diverged(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
