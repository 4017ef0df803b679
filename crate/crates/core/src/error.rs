use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes or lengths disagree.
    Shape(String),
    /// A token id outside the vocabulary.
    Vocab { id: u32, vocab: usize },
    /// A byte range outside the text it refers to.
    Bounds { start: usize, end: usize, len: usize },
    /// The context would exceed the model's maximum sequence length.
    Capacity { needed: usize, max_seq: usize },
    /// An attempt to highlight the attention-sink position 0.
    SinkToken,
    /// A region that selects no patch after downsampling.
    EmptySelection,
    /// A parameter outside its admissible range.
    Param(String),
    /// Weight tensors inconsistent with the model configuration.
    Weights(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Vocab { id, vocab } => write!(f, "token id {id} outside vocabulary of {vocab}"),
            Error::Bounds { start, end, len } => {
                write!(f, "range {start}..{end} outside text of length {len}")
            }
            Error::Capacity { needed, max_seq } => {
                write!(f, "context of {needed} positions exceeds max_seq {max_seq}")
            }
            Error::SinkToken => f.write_str("position 0 (sink token) cannot be highlighted"),
            Error::EmptySelection => f.write_str("region selects no patch"),
            Error::Param(msg) => write!(f, "invalid parameter: {msg}"),
            Error::Weights(msg) => write!(f, "invalid weights: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
