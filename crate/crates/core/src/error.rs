use alloc::string::String;

/// Errors raised anywhere in the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient in parameter {index} ({name}) at step {step}")]
    NonFiniteGradient {
        index: usize,
        name: String,
        step: u64,
    },
    #[error("out of range: {0}")]
    Range(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}
