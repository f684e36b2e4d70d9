use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("shapes {a:?} and {b:?} do not broadcast")]
    Broadcast { a: Vec<usize>, b: Vec<usize> },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    Invalid(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("netpbm: expected magic {expected}, found {found:?}")]
    PnmMagic { expected: &'static str, found: String },

    #[error("netpbm: malformed header: {0}")]
    PnmHeader(String),

    #[error("netpbm: payload size mismatch: expected {expected} bytes, found {found}")]
    PnmPayload { expected: usize, found: usize },

    #[error("checkpoint: bad magic")]
    CkptMagic,

    #[error("checkpoint: unsupported version {0}")]
    CkptVersion(u32),

    #[error("checkpoint: truncated while reading {0}")]
    CkptTruncated(String),

    #[error("checkpoint: bad framing at tensor {index} ({name}): {detail}")]
    CkptFraming {
        index: usize,
        name: String,
        detail: String,
    },

    #[error("covariance is not positive semidefinite (eigenvalue {0})")]
    NotPsd(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
