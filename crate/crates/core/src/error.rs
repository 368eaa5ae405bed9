use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value violates a documented constraint.
    #[error("config error: {0}")]
    Config(String),

    /// A caller-side contract was broken (e.g. non-scalar loss, missing gradient).
    #[error("contract violation: {0}")]
    Contract(String),

    /// `backward` was called on a value that does not depend on any trainable leaf.
    #[error("loss is detached from the tape: no input requires a gradient")]
    NoTape,

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed serialized data.
    #[error("format error: {0}")]
    Format(String),

    /// A parameter set does not match the architecture it is loaded into.
    #[error(
        "parameter mismatch: missing {missing:?}, unexpected {extra:?}, wrong shape {mismatched:?}"
    )]
    ParamMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
        mismatched: Vec<String>,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
