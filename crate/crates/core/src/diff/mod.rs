//! Reverse-mode differentiation, parameters and the Adam optimizer.
//!
//! All model arithmetic runs on a [`Tape`] that is rebuilt for every example
//! or batch. Values are 64-bit and every recorded value is checked to be
//! finite.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamState, StepOutcome};
pub use gradcheck::{gradient_check, relative_error, EntryCheck, GradCheckReport, Sampling, FD_STEP};
pub use params::{Gradients, Init, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("loss builder is not deterministic: {first} vs {second}")]
    Nondeterministic { first: f64, second: f64 },
}
