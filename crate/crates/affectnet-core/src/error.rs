//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Elementwise shapes neither equal nor broadcastable.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single-tensor shape constraint was violated (rank, dims, integral output size).
    InvalidShape { op: &'static str, message: String },
    /// Bad argument outside the shape system (probabilities, indices, batch sizes).
    InvalidArgument(String),
    /// backward() was asked to differentiate a non-scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// NaN/Inf where a finite value is required (gradients, losses).
    NonFinite(String),
    /// Checkpoint or image container problems: version, manifest, payload.
    Container(String),
    /// CSV parse/validation failure with position context.
    Csv {
        path: String,
        line: usize,
        message: String,
    },
    /// Key-value config file failure.
    Config { line: usize, message: String },
    /// Prediction/label join produced no usable rows.
    EmptyJoin(String),
    Io(std::io::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to:
    /// 1 validation/parse, 2 numerical failure, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 2,
            Error::ShapeMismatch { .. }
            | Error::InvalidShape { .. }
            | Error::NonScalarLoss { .. } => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shapes {lhs:?} and {rhs:?} are not compatible")
            }
            Error::InvalidShape { op, message } => write!(f, "{op}: {message}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::NonFinite(ctx) => write!(f, "non-finite value in {ctx}"),
            Error::Container(msg) => write!(f, "container error: {msg}"),
            Error::Csv {
                path,
                line,
                message,
            } => write!(f, "{path}:{line}: {message}"),
            Error::Config { line, message } => write!(f, "config line {line}: {message}"),
            Error::EmptyJoin(msg) => write!(f, "empty join: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
