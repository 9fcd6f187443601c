//! Crate-wide error type.

use std::fmt;

/// Structured error for every fallible operation in the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes that had to agree did not. Carries both sides.
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// A NaN or Inf crossed an op boundary while checked mode was on.
    NonFinite { op: &'static str },
    /// An argument violated a precondition (message names the constraint).
    InvalidArgument { op: &'static str, msg: String },
    /// A tensor handle was used with a tape it was not recorded on.
    NotOnTape { op: &'static str },
    /// Graph compilation failed; carries the offending row index.
    GraphDef { row: usize, msg: String },
    /// Checkpoint / report file problems (magic, version, truncation, shape table).
    Format { msg: String },
    /// Underlying I/O failure.
    Io { msg: String },
    /// Training diverged (non-finite loss) at the reported position.
    Diverged { epoch: usize, step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected}, got {got}")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite value in checked mode"),
            Error::InvalidArgument { op, msg } => write!(f, "{op}: {msg}"),
            Error::NotOnTape { op } => write!(f, "{op}: tensor is not on this tape"),
            Error::GraphDef { row, msg } => write!(f, "graph row {row}: {msg}"),
            Error::Format { msg } => write!(f, "format: {msg}"),
            Error::Io { msg } => write!(f, "io: {msg}"),
            Error::Diverged { epoch, step } => {
                write!(f, "training diverged at epoch {epoch}, step {step}")
            }
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io { msg: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl fmt::Display, got: impl fmt::Display) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

pub(crate) fn arg_err(op: &'static str, msg: impl fmt::Display) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.to_string(),
    }
}
