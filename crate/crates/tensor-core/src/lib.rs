//! Minimal dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The op set covers what small convolutional models need: convolution,
//! linear layers, pointwise nonlinearities, reductions, similarity and the
//! usual training losses. Reductions run in a fixed order, so a forward pass
//! is bitwise reproducible for identical inputs.

mod conv;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck, GradCheckConfig};
pub use image::{psnr_from_mse, Image};
pub use optim::{uniform_fan_in, Adam, Sgd};
pub use params::{BoundParams, ModelParams};
pub use tape::{Gradients, KinkTrace, Tape, Var};
pub use tensor::Tensor;
