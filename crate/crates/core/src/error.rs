use thiserror::Error;

/// Errors produced by the library.
///
/// Variants map onto the CLI exit-code contract: configuration and usage
/// problems exit 2, data/format problems exit 3, numeric aborts exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {id} out of range for table with {len} rows")]
    Index { id: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("attention state corrupted: {0}")]
    StateCorruption(String),

    #[error("mechanism `{mechanism}` does not support {capability}")]
    Capability {
        mechanism: String,
        capability: String,
    },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: u64, needed: u64 },

    #[error("tensor `{name}` shape mismatch: file has {file:?}, requested {requested:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        requested: Vec<usize>,
    },

    #[error("data format: {0}")]
    Format(String),

    #[error("numeric abort at step {step}: first non-finite tensor is `{tensor}`")]
    NumericAbort { step: usize, tensor: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
