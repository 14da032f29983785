use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the numerical core.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    Shape { context: String, detail: String },
    /// A value left its admissible range.
    InvalidArgument(String),
    /// A loss, gradient or activation became NaN or infinite.
    NonFinite { context: String },
    /// `backward` was called on a graph that recorded no differentiable path.
    NoGraph,
    /// Class id outside `0..num_classes`.
    ClassOutOfRange { class: usize, num_classes: usize },
    /// Class-wise statistics were required but never estimated.
    MissingClassStats,
    /// A pruning request would keep no records.
    EmptySelection(String),
    /// A pool or run refers to a different label store.
    HashMismatch(String),
    /// Index into a dataset, batch or store is out of range.
    IndexOutOfRange { what: &'static str, index: usize, len: usize },
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape { context: context.into(), detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { context, detail } => write!(f, "shape mismatch in {context}: {detail}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::NoGraph => f.write_str("backward called without a recorded graph"),
            Error::ClassOutOfRange { class, num_classes } => {
                write!(f, "class id {class} out of range for {num_classes} classes")
            }
            Error::MissingClassStats => f.write_str("class-wise BN statistics have not been estimated"),
            Error::EmptySelection(msg) => write!(f, "selection keeps no records: {msg}"),
            Error::HashMismatch(msg) => write!(f, "hash mismatch: {msg}"),
            Error::IndexOutOfRange { what, index, len } => {
                write!(f, "{what} index {index} out of range (len {len})")
            }
        }
    }
}

impl core::error::Error for Error {}
