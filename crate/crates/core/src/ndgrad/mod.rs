//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! The tape records primitive ops as they execute (define-by-run); one
//! backward pass walks the records in reverse and accumulates adjoints,
//! so values that fan out into several consumers sum their gradients.
//! Each training step owns a fresh [`Tape`]; parameters live outside the
//! tape and are registered per step.

mod adam;
mod check;
mod tape;
mod tensor;

pub use adam::{Adam, AdamParams};
pub use check::{gradient_check, GradCheckEntry, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors from tensor construction and tape ops. Shape and domain errors
/// signal a bug in loss assembly, not bad data; non-finite errors are the
/// divergence signal trainers watch for.
#[derive(Debug, Error)]
pub enum NdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("domain error in {op} (operand outside the op's domain)")]
    Domain { op: &'static str },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {got:?}")]
    NonScalarLoss { got: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

pub type NdResult<T> = Result<T, NdError>;
