use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("label {label} out of range for {num_classes} classes{context}")]
    LabelOutOfRange {
        label: usize,
        num_classes: usize,
        context: String,
    },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    Config(String),
    /// Raised by a training observer, e.g. a failed log or checkpoint write.
    #[error("{0}")]
    Observer(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        detail: detail.into(),
    }
}
