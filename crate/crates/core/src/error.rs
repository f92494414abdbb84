use thiserror::Error;

/// Failures reading a VBPM/VBPD container.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("truncated file: needed {needed} bytes, only {available} available")]
    Truncated { needed: u64, available: u64 },
    #[error("manifest disagrees with tensor `{name}`: {detail}")]
    ShapeDisagreement { name: String, detail: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Error)]
pub enum VbpError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: u64, got: u64 },
    #[error("invalid pruning plan: {0}")]
    Plan(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl VbpError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        VbpError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, VbpError>;
