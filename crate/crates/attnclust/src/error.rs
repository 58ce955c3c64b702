//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the library.
///
/// The variants are grouped by what went wrong rather than where, so callers
/// (in particular the CLI) can map them onto coarse failure classes: bad
/// configuration, bad data, numerical trouble, or a failed verification.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a documented precondition.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical routine failed (non-finite values, no convergence, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An executable check found a violation.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, lhs, rhs }
    }
}
