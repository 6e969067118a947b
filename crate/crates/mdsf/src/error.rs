use thiserror::Error;

/// Errors surfaced by kernel operations and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming both sides.
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// Invalid configuration value (kernel sizes, dilations, level ids, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Input outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// API misuse (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity appeared where the contract requires finite values.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Scene generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: format!("{lhs:?}"),
        rhs: format!("{rhs:?}"),
    }
}
