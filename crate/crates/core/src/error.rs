//! Error type shared by the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    UndersizedImage { width: usize, height: usize, min: usize },

    #[error("class count mismatch: prior has {prior} classes, map has {map}")]
    ClassCountMismatch { prior: usize, map: usize },

    #[error("class {0} is absent from the reference prior")]
    AbsentClass(usize),

    #[error("invalid semantic map: {0}")]
    InvalidMap(String),

    #[error("channel count {0} is not divisible by 16")]
    ChannelsNotDivisible(usize),

    #[error("invalid quantizer step {0} (must be positive and finite)")]
    InvalidStep(f64),

    #[error("cdf table alphabet is empty")]
    EmptyAlphabet,

    #[error("cdf table alphabet too large: {0} slots (max 65535)")]
    AlphabetTooLarge(usize),

    #[error("symbol {symbol} outside table bounds [{q_min}, {q_max}] and table has no escape slot")]
    SymbolOutOfRange { symbol: i64, q_min: i32, q_max: i32 },

    #[error("value {0} does not fit a 32-bit coded symbol")]
    SymbolOverflow(f64),

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("truncated stream while reading {0}")]
    Truncated(&'static str),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    BadVersion(u8),

    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("no usable training pairs found in {0}")]
    NoTrainingData(String),

    #[error("image format error: {0}")]
    ImageFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// 2 for data/format problems, 3 for internal invariant violations.
    /// Mirrors the CLI exit-code contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. }
            | Error::InvariantViolation(_)
            | Error::MissingGradient(_)
            | Error::UnknownParam(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
