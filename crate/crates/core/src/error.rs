use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("soft-DTW: {0}")]
    Sdtw(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("{format}: bad magic number: expected {expected:#010x}, found {actual:#010x}")]
    BadMagic {
        format: &'static str,
        expected: u32,
        actual: u32,
    },

    #[error("{format}: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Self::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }
}
