//! Equivariant morphological diffusion models.
//!
//! * [`geometry`]: the hyperbolic ball, its embedding of the plane, and the
//!   Euclidean group acting on points and on grid functions.
//! * [`morphpde`]: multiscale erosion/dilation as Hamilton–Jacobi solutions,
//!   convection, and two independent solvers used as oracles.
//! * [`autodiff`]: a small reverse-mode tape over dense tensors.
//! * [`gmcunet`]: the denoising U-Net whose middle block uses
//!   convection–dilation–erosion residual blocks.
//! * [`diffusion`]: DDPM schedule, forward process, posterior and sampler.
//! * [`data_io`]: datasets, checkpoints, image grids, MMD.
//! * [`pipeline`]: configuration, training, sampling and the verification
//!   suites behind the command-line tool.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data_io;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod gmcunet;
pub mod grid;
pub mod morphpde;
pub mod pipeline;

pub use error::{Error, Result};
pub use grid::GridFunction;
