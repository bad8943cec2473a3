use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("kernel dimensions must be odd, got {kh}x{kw}")]
    EvenKernel { kh: usize, kw: usize },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("batch normalization needs at least 2 values per channel in train mode, got {count}")]
    BatchTooSmall { count: usize },

    #[error("backward called without a cached forward pass ({layer})")]
    MissingCache { layer: String },

    #[error("parameter group {index} has no accumulated gradient")]
    MissingGradient { index: usize },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("empty spectrum: input is identically zero")]
    EmptySpectrum,

    #[error("zero-norm reference")]
    ZeroReference,

    #[error("gather of {n_t}x{n_x} is smaller than the required {need_t}x{need_x}")]
    GatherTooSmall {
        n_t: usize,
        n_x: usize,
        need_t: usize,
        need_x: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("truncated header")]
    TruncatedHeader,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("trailing bytes after payload: {extra}")]
    TrailingBytes { extra: u64 },

    #[error("corrupt weights: checksum {found:#010x} != {expected:#010x}")]
    CorruptWeights { expected: u32, found: u32 },

    #[error("incompatible architecture: {reason}")]
    IncompatibleArchitecture { reason: String },

    #[error("{0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that come from arithmetic rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numerical(_))
    }
}
