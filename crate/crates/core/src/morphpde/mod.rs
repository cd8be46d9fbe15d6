//! Morphological scale spaces as Hamilton–Jacobi solutions.
//!
//! Erosion and dilation with the structuring family
//! `b_t^k(d) = c_k d^{k/(k−1)} / t^{1/(k−1)}` are the viscosity solutions of
//! `u_t ± ‖∇u‖^k = 0`. They are computed here as windowed inf/sup scans over
//! lattice offsets. Two independent routes to the same solution live next
//! to them: a direct Hopf–Lax evaluation and an upwind finite-difference
//! solver. A convection operator transports features along constant
//! per-channel velocity fields.

mod convect;
mod fd;
mod hopf_lax;
mod morphology;
mod structuring;

pub use convect::{convect, ConvectionSpec};
pub use fd::{fd_hj_solve, lipschitz};
pub use hopf_lax::{hopf_lax_solve, lagrangian};
pub use morphology::{dilate, erode, flat_dilate, flat_erode};
pub use structuring::{DistanceMode, StructuringSpec, Window};

use crate::error::MorphError;
use crate::grid::GridFunction;

/// Norm used in the Hamiltonian `H(q) = ‖q‖_p^k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LpNorm {
    L1,
    L2,
    LInf,
}

impl LpNorm {
    pub fn norm2(self, a: f64, b: f64) -> f64 {
        match self {
            LpNorm::L1 => a.abs() + b.abs(),
            LpNorm::L2 => a.hypot(b),
            LpNorm::LInf => a.abs().max(b.abs()),
        }
    }

    /// The dual norm, which the Legendre transform of `‖·‖_p^k` uses.
    pub fn dual(self) -> LpNorm {
        match self {
            LpNorm::L1 => LpNorm::LInf,
            LpNorm::L2 => LpNorm::L2,
            LpNorm::LInf => LpNorm::L1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MorphSign {
    /// `u_t + ‖∇u‖^k = 0`
    Erosion,
    /// `u_t − ‖∇u‖^k = 0`
    Dilation,
}

/// Cauchy problem `u_t ± ‖∇u‖_p^k = 0`, `u(·, 0) = f` on a lattice of
/// spacing `grid_spacing`.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphPdeProblem {
    pub initial: GridFunction,
    pub k: f64,
    pub lp_norm: LpNorm,
    pub sign: MorphSign,
    pub horizon: f64,
    pub grid_spacing: f64,
}

impl MorphPdeProblem {
    pub fn validate(&self) -> Result<(), MorphError> {
        if !(self.k > 1.0 && self.k.is_finite()) {
            return Err(MorphError::InvalidExponent(self.k));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(MorphError::InvalidHorizon(self.horizon));
        }
        if !(self.grid_spacing > 0.0 && self.grid_spacing.is_finite()) {
            return Err(MorphError::InvalidSpacing(self.grid_spacing));
        }
        Ok(())
    }
}

/// `c_k = (k − 1) / k^{k/(k−1)}`.
pub fn c_k(k: f64) -> f64 {
    let c = (k - 1.0) / k.powf(k / (k - 1.0));
    if fault::active() {
        -c
    } else {
        c
    }
}

/// Fault injection for rehearsing the verification harness: while a
/// [`fault::FlipCkSign`] guard is alive, [`c_k`] returns its negation on
/// the current thread.
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static FLIP: Cell<bool> = const { Cell::new(false) };
    }

    pub(super) fn active() -> bool {
        FLIP.with(Cell::get)
    }

    #[must_use = "the fault is cleared when the guard drops"]
    pub struct FlipCkSign {
        previous: bool,
    }

    impl FlipCkSign {
        pub fn new() -> Self {
            Self {
                previous: FLIP.with(|f| f.replace(true)),
            }
        }
    }

    impl Default for FlipCkSign {
        fn default() -> Self {
            Self::new()
        }
    }

    impl Drop for FlipCkSign {
        fn drop(&mut self) {
            FLIP.with(|f| f.set(self.previous));
        }
    }
}
