use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op} at flat index {index} of tensor {shape:?}")]
    NonFinite {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index {index} out of range (valid: 0..{len})")]
    Index { index: usize, len: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("schedule step {step} exceeds total {total}")]
    Schedule { step: usize, total: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },
    #[error("inversion diverged at iteration {iteration} (sample {sample})")]
    InversionDiverged { iteration: usize, sample: usize },
    #[error("failed to load model for epoch {epoch}: {message}")]
    Load { epoch: usize, message: String },
}

pub type Result<T> = core::result::Result<T, Error>;
