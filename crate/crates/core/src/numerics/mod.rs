//! Float64 tensors, a reverse-mode autodiff tape, and the stochastic
//! straight-through primitives the rest of the crate is built from.

mod gradcheck;
pub mod math;
mod rng;
mod tape;
mod tensor;

use alloc::string::String;
use alloc::vec::Vec;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use rng::{RngState, Stream};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs a different number of values than {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("invalid {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("contract violated: {0}")]
    Contract(&'static str),
    #[error("{0}")]
    Other(String),
}
