use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor shape {h}x{w}x{d} with {len} values")]
    InvalidShape { h: usize, w: usize, d: usize, len: usize },

    #[error("non-finite value at flat offset {offset}")]
    NonFinite { offset: usize },

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("truncated payload: needed {needed} more bytes while reading {context}")]
    Truncated { context: &'static str, needed: usize },

    #[error("unknown {what} tag {tag}")]
    UnknownTag { what: &'static str, tag: u8 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("cannot normalize the zero vector")]
    ZeroVector,

    #[error("empty descriptor set")]
    EmptyDescriptorSet,

    #[error("need at least {needed} distinct samples, got {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("rank deficient: requested {requested} components, data supports {achieved}")]
    RankDeficient { requested: usize, achieved: usize },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("invalid box {0}")]
    InvalidBox(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable identifier, one per variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidShape { .. } => "invalid_shape",
            Error::NonFinite { .. } => "non_finite",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Truncated { .. } => "truncated",
            Error::UnknownTag { .. } => "unknown_tag",
            Error::Malformed(_) => "malformed",
            Error::ZeroVector => "zero_vector",
            Error::EmptyDescriptorSet => "empty_descriptor_set",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::DuplicateId(_) => "duplicate_id",
            Error::InvalidRecord(_) => "invalid_record",
            Error::InvalidBox(_) => "invalid_box",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
