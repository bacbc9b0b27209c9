use alloc::string::String;
use thiserror::Error;

/// Errors raised by the matching core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("training aborted: {0}")]
    Training(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }
}
