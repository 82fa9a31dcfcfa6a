//! Error type shared across the crate.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor math, data handling, attacks and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes that an operation requires to conform do not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation produced a NaN or infinite value.
    NonFinite { op: String },
    /// A gradient was non-finite; for iterative attacks carries the step index.
    NonFiniteGradient { what: String, step: Option<usize> },
    /// Generic precondition violation with a human-readable message.
    InvalidArgument(String),
    /// Token id outside the vocabulary.
    OutOfVocab { id: u16, vocab_size: usize },
    /// A word that cannot be tokenized.
    UnknownWord(String),
    /// File container carried the wrong magic bytes.
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    /// File ended before the declared payload was complete.
    TruncatedPayload { what: String },
    /// Declared lengths/shapes in a file disagree with the payload.
    LengthMismatch { what: String },
    /// Training loss became non-finite at the given step.
    Divergence { step: usize },
    /// Loss denominator collapsed (e.g. DLR on degenerate logits).
    DegenerateLogits,
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")
            }
            Error::NonFinite { op } => write!(f, "non-finite value produced by `{op}`"),
            Error::NonFiniteGradient { what, step } => match step {
                Some(s) => write!(f, "non-finite gradient in {what} at step {s}"),
                None => write!(f, "non-finite gradient in {what}"),
            },
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::OutOfVocab { id, vocab_size } => {
                write!(f, "token id {id} outside vocabulary of size {vocab_size}")
            }
            Error::UnknownWord(w) => write!(f, "word not in vocabulary: {w:?}"),
            Error::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                found
            ),
            Error::TruncatedPayload { what } => write!(f, "truncated payload while reading {what}"),
            Error::LengthMismatch { what } => write!(f, "length mismatch in {what}"),
            Error::Divergence { step } => write!(f, "training diverged (non-finite loss) at step {step}"),
            Error::DegenerateLogits => write!(f, "degenerate logits: zero DLR denominator"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
