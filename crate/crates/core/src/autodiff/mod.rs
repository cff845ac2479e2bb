//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The [`Tape`] records tensor-level operations during a forward pass and
//! replays their adjoints in reverse. [`finite_diff_gradients`] is the
//! independent central-difference oracle used to verify every adjoint.

mod gradcheck;
mod init;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{compare_gradients, finite_diff_gradients, relative_error, GradCheckRow};
pub use init::{glorot_bound, param_seed, seeded_init, seeded_uniform};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{AdjointFault, Gradients, Tape, Var, DISTRIBUTION_TOL, LOG_CLAMP};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid tensor shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("not a probability distribution (sum {sum})")]
    NotADistribution { sum: f64 },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must have a single element, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite loss while perturbing {param}[{index}]")]
    NonFiniteLoss { param: String, index: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}
