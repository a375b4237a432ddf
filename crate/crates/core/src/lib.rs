// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod nn;
pub mod perceptual;
pub mod pipeline;
pub mod prompt;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
