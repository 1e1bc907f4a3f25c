//! Error types shared across the engine.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CafeError>;

#[derive(Debug, Error)]
pub enum CafeError {
    /// A caller violated an operation precondition (shape mismatch,
    /// non-finite entries, out-of-range argument).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numerical routine failed or produced non-finite values
    /// (eigen-solver non-convergence, diverging loss, non-finite gradient).
    #[error("numerical error: {0}")]
    NumericalError(String),

    /// The batch covariance of a feature group is singular, so the Gaussian
    /// KL divergence is undefined. Carries the offending group id.
    #[error("degenerate batch covariance in group {group}: {hint}")]
    DegenerateBatch { group: usize, hint: String },

    /// A file does not start with the expected magic bytes or its layout
    /// does not match the declared header.
    #[error("format error: {0}")]
    FormatError(String),

    /// A file carries an unsupported format version.
    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    /// A file ended before the declared payload was complete.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// The stored CRC32 does not match the payload.
    #[error("checksum failure: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumFailure { stored: u32, computed: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CafeError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CafeError::InvalidInput(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CafeError::NumericalError(msg.into())
    }

    pub fn degenerate(group: usize) -> Self {
        CafeError::DegenerateBatch {
            group,
            hint: "reduce the group count k or increase the batch size so that \
                   every feature group is smaller than the batch"
                .to_string(),
        }
    }
}
