//! Error type shared by the whole crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes for kernel construction, state evaluation, and quadrature.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter fails its domain requirement (non-finite, wrong sign, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Geometry degenerates (coincident points, zero-length direction).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// An operation was asked to run with a kernel of the wrong evaluation mode.
    #[error("kernel mode mismatch: {0}")]
    ModeMismatch(String),

    /// The requested combination is not supported.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A numerical evaluation produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The requested time step violates the stability/positivity bound.
    #[error("step size too large: {0}")]
    StepSize(String),

    /// Malformed configuration.
    #[error("config error: {0}")]
    Config(String),

    /// File I/O while reading or writing grid states.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
