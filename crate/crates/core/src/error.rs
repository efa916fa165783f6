use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("input contains a non-finite value at index {index}")]
    NonFiniteInput { index: usize },

    #[error("plane has no tokens or no channels")]
    EmptyPlane,

    #[error("empty input")]
    EmptyInput,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("scale {0} is not a finite non-negative number")]
    NonFiniteScale(f64),

    #[error("byte {0:#04x} is the FP8 E4M3 NaN pattern")]
    NaNPattern(u8),

    #[error("value {value} does not fit in a symmetric {bits}-bit field")]
    RangeOverflow { value: i32, bits: u8 },

    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("corrupt chunk {index}: {reason}")]
    CorruptChunk { index: usize, reason: String },

    #[error("chunk index {index} out of range (file holds {count} chunks)")]
    OutOfRange { index: usize, count: usize },

    #[error("chunk does not match container header: {0}")]
    ConfigMismatch(String),

    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("bad container header: {0}")]
    BadHeader(String),

    #[error("unsupported version {0}")]
    BadVersion(u16),

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("unknown method tag {0}")]
    UnknownMethod(u8),

    #[error("bad generator parameters: {0}")]
    BadParams(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
