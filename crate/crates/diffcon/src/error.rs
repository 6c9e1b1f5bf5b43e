//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or layout mismatch between tensors, layers, or batches.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid construction parameter (schedule bounds, divergence order, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation left the finite-float domain or a solver failed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A sampled state became non-finite during the reverse process.
    #[error("divergence at reverse step t={t}: non-finite state")]
    Divergence { t: usize },

    /// Step index outside the valid range for the schedule.
    #[error("range error: {0}")]
    Range(String),

    /// Brute-force enumeration would exceed the configured guard.
    #[error("enumeration guard exceeded: {0}")]
    EnumerationGuard(String),

    /// Config-file syntax or schema violation.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Malformed or truncated checkpoint bytes.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
