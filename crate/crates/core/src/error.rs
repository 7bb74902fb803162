use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor math, attention builders, and model plumbing.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes cannot be combined by the named operation.
    Shape {
        op: &'static str,
        detail: String,
    },
    /// A softmax row had every entry masked out.
    DegenerateRow {
        op: &'static str,
        row: usize,
    },
    /// A scalar or structural argument violated the operation's contract.
    Argument {
        op: &'static str,
        detail: String,
    },
    /// An index was outside the valid range.
    Index {
        op: &'static str,
        index: isize,
        len: usize,
    },
    /// A structural contract was violated (e.g. backward from a non-scalar).
    Contract {
        op: &'static str,
        detail: String,
    },
    /// A serialized artifact could not be decoded.
    Format {
        detail: String,
    },
    /// A computation produced or met a non-finite value it cannot handle.
    Numeric {
        detail: String,
    },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape error: {detail}"),
            Error::DegenerateRow { op, row } => {
                write!(f, "{op}: row {row} is fully masked")
            }
            Error::Argument { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Error::Index { op, index, len } => {
                write!(f, "{op}: index {index} out of range for length {len}")
            }
            Error::Contract { op, detail } => write!(f, "{op}: contract violation: {detail}"),
            Error::Format { detail } => write!(f, "format error: {detail}"),
            Error::Numeric { detail } => write!(f, "numeric error: {detail}"),
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

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn argument(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Argument {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}
