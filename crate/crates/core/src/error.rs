//! Error type shared by every module in the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error for tensor, geometry, image, encoder, and harness failures.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    Shape { op: &'static str, detail: String },
    /// A numeric hyperparameter is outside its valid range.
    Parameter { what: String },
    /// A documented precondition was violated by the caller.
    Contract { what: String },
    /// A vector with zero norm reached an operation that needs a direction.
    Degenerate { what: String },
    /// A crop or clamp produced a region with no pixels.
    EmptyRegion { detail: String },
    /// A line of an input stream could not be parsed.
    Parse { line: usize, detail: String },
    /// A parsed record violates a field invariant.
    Validation { line: usize, detail: String },
    /// The run configuration is inconsistent.
    Config { what: String },
    /// A serialized artifact is malformed; `offset` is the failing byte position.
    Format { offset: u64, detail: String },
    /// A caption contains a token outside the vocabulary.
    Tokenize { what: String },
    /// An operation produced a non-finite value.
    NonFinite { op: &'static str },
    /// Training stopped because the loss left the finite range.
    TrainAbort { step: usize, detail: String },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::Parameter { what } => write!(f, "invalid parameter: {what}"),
            Error::Contract { what } => write!(f, "contract violation: {what}"),
            Error::Degenerate { what } => write!(f, "degenerate vector: {what}"),
            Error::EmptyRegion { detail } => write!(f, "empty region: {detail}"),
            Error::Parse { line, detail } => write!(f, "parse error at line {line}: {detail}"),
            Error::Validation { line, detail } => {
                write!(f, "invalid record at line {line}: {detail}")
            }
            Error::Config { what } => write!(f, "configuration error: {what}"),
            Error::Format { offset, detail } => {
                write!(f, "format error at byte {offset}: {detail}")
            }
            Error::Tokenize { what } => write!(f, "tokenization error: {what}"),
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::TrainAbort { step, detail } => {
                write!(f, "training aborted at step {step}: {detail}")
            }
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
