//! Error taxonomy shared across the crate.

use thiserror::Error;

/// All failure modes surfaced by this crate.
#[derive(Error, Debug)]
pub enum UfdnError {
    /// Tensor shapes or axes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A configuration value is structurally invalid (architecture, train
    /// config, run config).
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Input data violates a documented precondition (bad targets, labels
    /// out of range, malformed domain vectors).
    #[error("validation failed: {0}")]
    Validation(String),
    /// API misuse: the caller broke a contract that is not data-dependent
    /// (non-scalar backward root, tensor from a foreign graph, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A checkpoint file does not look like a checkpoint at all.
    #[error("bad checkpoint format: {0}")]
    Format(String),
    /// A checkpoint parses but its contents are inconsistent.
    #[error("checkpoint integrity: {0}")]
    Integrity(String),
    /// A loss became non-finite during training.
    #[error("training diverged at step {step}: loss `{loss}` is not finite")]
    Divergence { step: u64, loss: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, UfdnError>;
