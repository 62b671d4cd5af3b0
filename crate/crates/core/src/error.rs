use thiserror::Error;

/// Errors produced by any module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("cannot normalize a zero vector ({0})")]
    ZeroVector(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("k={k} exceeds the {available} entries available after exclusions")]
    KTooLarge { k: usize, available: usize },

    #[error("dedupe removed every entry in the store")]
    DedupeEmptiedStore,

    #[error("mean fusion produced a zero vector (degenerate fusion)")]
    DegenerateFusion,

    #[error("loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("function is not deterministic: two evaluations disagree ({0} vs {1})")]
    NonDeterministic(f64, f64),

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("file truncated: needed {needed} more bytes")]
    Truncated { needed: usize },

    #[error("training diverged: loss non-finite for {0} consecutive steps")]
    Diverged(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
