//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value and the inputs it was computed from; [`Tape::backward`] sweeps
//! the nodes in reverse and accumulates cotangents. The op set is exactly
//! what the denoiser needs: elementwise arithmetic, (batched) matrix
//! products, 2-D convolution, group normalisation, softmax, per-channel
//! bilinear shifts, and windowed min/max scans that route their gradient to
//! the selected sample.
//!
//! Everything is generic over [`Scalar`] so the same graph runs in `f32`
//! for training and in `f64` for finite-difference checks.

mod ops_basic;
mod ops_morph;
mod ops_nn;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use ops_morph::{StructuringDistance, WindowKind};
pub use ops_nn::Padding;
pub use optim::{ema_update, Adam, AdamConfig, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
