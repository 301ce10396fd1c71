//! Dense-matrix arithmetic, stable loss primitives, and a minimal
//! reverse-mode gradient tape.
//!
//! Everything here works on row-major `f64` matrices. The tape records
//! exactly the operations the transformer forward pass needs; gradients
//! come from replaying the recorded ops in reverse. A central-difference
//! checker lives in [`finite_diff`] so analytic gradients can be audited
//! against an independent oracle.

mod finite_diff;
mod matrix;
mod primitives;
mod tape;

pub use finite_diff::finite_difference_grad;
pub use matrix::DenseMatrix;
pub use primitives::{
    masked_softmax, row_kl_divergence, sigmoid_cross_entropy, KL_EPSILON, MASK_FORBIDDEN,
};
pub use tape::{GradTape, GradientMap, ParamSet, ValueId};

use thiserror::Error;

/// Errors from matrix construction, primitives, and the tape.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{context}: expected shape {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("{context}: empty input")]
    EmptyInput { context: &'static str },
    #[error("{context}: produced a non-finite value")]
    NonFinite { context: &'static str },
    #[error("masked softmax: row {row} has every position forbidden")]
    AllForbidden { row: usize },
    #[error("kl divergence: no valid rows selected")]
    NoValidRows,
    #[error("kl divergence: {which} row {row} sums to {sum}, not a probability row")]
    NotStochastic {
        which: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("cross entropy: label {value} at index {index} is not 0 or 1")]
    BadLabel { value: f64, index: usize },
    #[error("parameter {name:?} registered twice")]
    DuplicateParam { name: String },
    #[error("backward: loss must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("finite difference: step must be positive, got {h}")]
    BadStep { h: f64 },
    #[error("finite difference: objective returned a non-finite value at {name}[{index}]")]
    NonFiniteObjective { name: String, index: usize },
    #[error("{context}: index {index} out of bounds for {bound}")]
    IndexOutOfBounds {
        context: &'static str,
        index: usize,
        bound: usize,
    },
}
