//! Minimal reverse-mode differentiable array substrate.
//!
//! The operation set is closed and small: elementwise arithmetic, matmul,
//! temperature softmax, layernorm, silu/softplus, reductions, row gathers,
//! concatenation and a cumulative sum along the sequence axis. These are
//! exactly the pieces the encoder, heads and losses decompose into.

pub mod array;
pub mod gradcheck;
pub mod params;
pub mod scalar;
pub mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamBinder, ParamSet};
pub use scalar::{Dtype, Scalar};
pub use tape::{Gradients, Tape, TensorId};
