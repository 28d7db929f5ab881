use thiserror::Error;

use crate::liegroup::GroupTag;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("group tag mismatch: {0:?} vs {1:?}")]
    TagMismatch(GroupTag, GroupTag),
    #[error("non-finite value while evaluating {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("slot {slot} out of range 1..={max}")]
    SlotOutOfRange { slot: usize, max: usize },
    #[error("inconsistent input: {0}")]
    Inconsistent(String),
    #[error("step {step} failed to converge: residual {residual:.3e} after {iterations} iterations")]
    StepFailure {
        step: usize,
        iterations: usize,
        residual: f64,
    },
    #[error("singular step Jacobian at step {step} (condition estimate {cond:.3e})")]
    Regularity { step: usize, cond: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
