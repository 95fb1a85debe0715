//! Desk-scale self-supervised pretraining for ultrasound-style imagery.
//!
//! The crate combines a small vision state-space encoder with teacher-student
//! self-distillation, masked image modeling over global/local views, and a
//! self-adaptive masking curriculum driven by teacher attention and the
//! student's reconstruction-loss history. A linear-probe harness measures
//! transfer on a synthetic speckle-phantom task.

pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod masking;
pub mod probe;
pub mod recon;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::array::Array;
pub use tensor::scalar::Scalar;
pub use tensor::tape::{Tape, TensorId};
