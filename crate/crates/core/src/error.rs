use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors produced by the compression engine.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Operand dimensions do not line up.
    Shape { op: &'static str, expected: (usize, usize), got: (usize, usize) },
    /// An index list was out of range or not strictly ascending.
    Index { op: &'static str, index: usize, bound: usize },
    /// A documented precondition was violated.
    Precondition(String),
    /// A stored channel mask disagrees with the one supplied.
    MaskConflict,
    /// An iterative routine ran out of sweeps.
    NoConvergence { iterations: usize, off_diagonal: f64 },
    /// A serialized block or mask is malformed.
    Format(String),
    /// Input is too large or degenerate for the requested routine.
    Guard(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {}x{}, got {}x{}", expected.0, expected.1, got.0, got.1)
            }
            Error::Index { op, index, bound } => {
                write!(f, "{op}: index {index} invalid (bound {bound}, must be strictly ascending)")
            }
            Error::Precondition(msg) => write!(f, "precondition violated: {msg}"),
            Error::MaskConflict => f.write_str("channel mask differs from the mask stored in the cache"),
            Error::NoConvergence { iterations, off_diagonal } => {
                write!(f, "jacobi sweep did not converge after {iterations} iterations (off-diagonal {off_diagonal:e})")
            }
            Error::Format(msg) => write!(f, "malformed data: {msg}"),
            Error::Guard(msg) => write!(f, "guard: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub(crate) fn precondition(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}
