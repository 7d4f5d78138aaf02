use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A row that must be normalizable has (near) zero norm.
    DegenerateRow { op: &'static str, row: usize },
    /// A caller broke an API contract (non-scalar loss, reused tape, missing gradient).
    Contract(String),
    /// Invalid hyperparameters or inconsistent configuration.
    Config(String),
    /// Engine state does not allow the operation (empty queue, uninitialized teacher).
    State(String),
    /// Invalid user data (label out of range, empty input).
    Input(String),
    /// A training step failed; wraps the underlying error with its step index.
    Step {
        step: u64,
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// The innermost error, with any step wrapper removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::DegenerateRow { op, row } => {
                write!(f, "{op}: row {row} has zero norm")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::State(msg) => write!(f, "invalid state: {msg}"),
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::Step { step, source } => write!(f, "step {step}: {source}"),
        }
    }
}

impl core::error::Error for Error {}
