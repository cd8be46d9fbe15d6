//! Hyperbolic ball geometry and Euclidean group actions.
//!
//! The ball `𝔹ⁿ = { x : ‖x‖ < 1 }` carries the conformal metric
//! `4‖dx‖² / (1 − ‖x‖²)²`. Its distance depends on `x` and `y` only through
//! `‖x − y‖`, `‖x‖` and `‖y‖`, so every orthogonal map of the ambient space
//! is an isometry. `embed` maps all of `ℝⁿ` into the ball and `unembed` is
//! its inverse.
//!
//! Grid functions are acted on by the lattice-preserving part of `E(2)`
//! (integer shifts, quarter turns, axis flips) together with channel
//! permutations, all on a periodic lattice so that the action is an exact
//! group homomorphism.

use nalgebra::{DMatrix, DVector};

use crate::error::GeometryError;
use crate::grid::GridFunction;

/// Lower clamp on `1 − ‖x‖²` before dividing by it.
pub const BOUNDARY_GUARD: f64 = 1e-15;

const ORTHOGONALITY_TOL: f64 = 1e-12;

/// A point of the open unit ball.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperbolicPoint {
    coords: DVector<f64>,
}

impl HyperbolicPoint {
    pub fn new(coords: DVector<f64>) -> Result<Self, GeometryError> {
        let norm_sq = coords.norm_squared();
        if !(norm_sq < 1.0) {
            return Err(GeometryError::OutsideBall { norm_sq });
        }
        Ok(Self { coords })
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self, GeometryError> {
        Self::new(DVector::from_column_slice(coords))
    }

    pub fn origin(dim: usize) -> Self {
        Self {
            coords: DVector::zeros(dim),
        }
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm_squared(&self) -> f64 {
        self.coords.norm_squared()
    }
}

/// `arccosh(z)` for `z ≥ 1`, written as `ln(z + √(z² − 1))`. Inputs that
/// rounding pushed just below one are clamped.
pub fn arccosh(z: f64) -> f64 {
    let z = z.max(1.0);
    (z + (z * z - 1.0).sqrt()).ln()
}

/// Ball distance on raw coordinates. Callers guarantee both points lie in
/// the ball; the `1 − ‖·‖²` factors are clamped at [`BOUNDARY_GUARD`].
pub fn ball_distance(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut diff_sq = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        diff_sq += (a - b) * (a - b);
        nx += a * a;
        ny += b * b;
    }
    let gx = (1.0 - nx).max(BOUNDARY_GUARD);
    let gy = (1.0 - ny).max(BOUNDARY_GUARD);
    arccosh(1.0 + 2.0 * diff_sq / (gx * gy))
}

pub fn hyperbolic_distance(x: &HyperbolicPoint, y: &HyperbolicPoint) -> Result<f64, GeometryError> {
    if x.dim() != y.dim() {
        return Err(GeometryError::DimensionMismatch {
            expected: x.dim(),
            actual: y.dim(),
        });
    }
    for p in [x, y] {
        let norm_sq = p.norm_squared();
        if !(norm_sq < 1.0) {
            return Err(GeometryError::OutsideBall { norm_sq });
        }
    }
    Ok(ball_distance(x.coords.as_slice(), y.coords.as_slice()))
}

/// `Φ(x) = x / √(1 + ‖x‖²)`, an embedding of `ℝⁿ` into the ball.
pub fn embed(x: &DVector<f64>) -> HyperbolicPoint {
    let scale = 1.0 / (1.0 + x.norm_squared()).sqrt();
    HyperbolicPoint { coords: x * scale }
}

/// `S(p) = p / √(1 − ‖p‖²)`, the inverse of [`embed`].
pub fn unembed(p: &HyperbolicPoint) -> Result<DVector<f64>, GeometryError> {
    let norm_sq = p.norm_squared();
    if !(norm_sq < 1.0) {
        return Err(GeometryError::OutsideBall { norm_sq });
    }
    let gap = (1.0 - norm_sq).max(BOUNDARY_GUARD);
    Ok(&p.coords / gap.sqrt())
}

/// Jacobian of [`embed`]: `(1/√(1+‖x‖²)) (I − x xᵀ / (1+‖x‖²))`.
pub fn embed_jacobian(x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let s = 1.0 + x.norm_squared();
    let outer = x * x.transpose();
    (DMatrix::identity(n, n) - outer / s) / s.sqrt()
}

/// Distance from `Φ(Δ)` to the origin, evaluated in closed form.
///
/// With `r = ‖Δ‖`, `‖Φ(Δ)‖² = r²/(1+r²)` and the distance collapses to
/// `arccosh(1 + 2r²)`; this avoids the cancellation in `1 − ‖Φ‖²` for large
/// offsets.
pub fn embedded_origin_distance(r: f64) -> f64 {
    arccosh(1.0 + 2.0 * r * r)
}

/// How a pixel lattice sits in the plane before it is embedded in the ball.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    /// Length of one pixel step in ambient coordinates.
    pub pixel_scale: f64,
    /// Reference point `x₀` of the ball.
    pub base_point: HyperbolicPoint,
}

impl GridGeometry {
    pub fn new(
        height: usize,
        width: usize,
        pixel_scale: f64,
        base_point: HyperbolicPoint,
    ) -> Result<Self, GeometryError> {
        if height == 0 || width == 0 {
            return Err(GeometryError::Grid(crate::error::GridError::Empty));
        }
        if !(pixel_scale > 0.0 && pixel_scale.is_finite()) {
            return Err(GeometryError::NotLatticePreserving(format!(
                "pixel scale must be positive, got {pixel_scale}"
            )));
        }
        if base_point.dim() != 2 {
            return Err(GeometryError::DimensionMismatch {
                expected: 2,
                actual: base_point.dim(),
            });
        }
        Ok(Self {
            height,
            width,
            pixel_scale,
            base_point,
        })
    }

    /// Unit pixel spacing with the origin as reference point.
    pub fn unit(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixel_scale: 1.0,
            base_point: HyperbolicPoint::origin(2),
        }
    }

    pub fn for_grid(f: &GridFunction) -> Self {
        Self::unit(f.height(), f.width())
    }

    pub fn with_pixel_scale(mut self, pixel_scale: f64) -> Self {
        self.pixel_scale = pixel_scale;
        self
    }
}

/// An element of `E(n)`: `x ↦ linear · x + shift` with orthogonal `linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct EuclideanTransform {
    linear: DMatrix<f64>,
    shift: DVector<f64>,
}

impl EuclideanTransform {
    pub fn new(linear: DMatrix<f64>, shift: DVector<f64>) -> Result<Self, GeometryError> {
        if !linear.is_square() {
            return Err(GeometryError::DimensionMismatch {
                expected: linear.nrows(),
                actual: linear.ncols(),
            });
        }
        if shift.len() != linear.nrows() {
            return Err(GeometryError::DimensionMismatch {
                expected: linear.nrows(),
                actual: shift.len(),
            });
        }
        let n = linear.nrows();
        let deviation = (linear.transpose() * &linear - DMatrix::<f64>::identity(n, n)).amax();
        if deviation > ORTHOGONALITY_TOL {
            return Err(GeometryError::NotOrthogonal { deviation });
        }
        Ok(Self { linear, shift })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            linear: DMatrix::identity(n, n),
            shift: DVector::zeros(n),
        }
    }

    pub fn translation(shift: DVector<f64>) -> Self {
        let n = shift.len();
        Self {
            linear: DMatrix::identity(n, n),
            shift,
        }
    }

    /// Planar rotation by `theta` radians (counter-clockwise).
    pub fn rotation2(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            linear: DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
            shift: DVector::zeros(2),
        }
    }

    /// Planar rotation by `quarter_turns · 90°` with exact integer entries.
    pub fn quarter_turn(quarter_turns: i32) -> Self {
        let (c, s) = match quarter_turns.rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
        Self {
            linear: DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
            shift: DVector::zeros(2),
        }
    }

    /// Reflection negating coordinate `axis`.
    pub fn reflection(n: usize, axis: usize) -> Self {
        let mut linear = DMatrix::identity(n, n);
        linear[(axis, axis)] = -1.0;
        Self {
            linear,
            shift: DVector::zeros(n),
        }
    }

    /// Coordinate permutation with `(σx)ᵢ = x_{σ(i)}` (zero-based `sigma`).
    pub fn permutation(sigma: &[usize]) -> Result<Self, GeometryError> {
        check_permutation(sigma)?;
        let n = sigma.len();
        let mut linear = DMatrix::zeros(n, n);
        for (i, &j) in sigma.iter().enumerate() {
            linear[(i, j)] = 1.0;
        }
        Ok(Self {
            linear,
            shift: DVector::zeros(n),
        })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn linear(&self) -> &DMatrix<f64> {
        &self.linear
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, GeometryError> {
        if x.len() != self.dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(&self.linear * x + &self.shift)
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &EuclideanTransform) -> Result<Self, GeometryError> {
        if self.dim() != other.dim() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(Self {
            linear: &self.linear * &other.linear,
            shift: &self.linear * &other.shift + &self.shift,
        })
    }

    pub fn inverse(&self) -> Self {
        let lt = self.linear.transpose();
        let shift = -(&lt * &self.shift);
        Self { linear: lt, shift }
    }

    /// True when the linear part is a signed permutation and the shift is
    /// integral, so the map sends `ℤⁿ` onto itself.
    pub fn is_lattice_map(&self) -> bool {
        let signed_perm = self.linear.iter().all(|&v| v == 0.0 || v == 1.0 || v == -1.0)
            && self
                .linear
                .row_iter()
                .all(|r| r.iter().filter(|v| **v != 0.0).count() == 1);
        signed_perm && self.shift.iter().all(|v| v.fract() == 0.0)
    }
}

fn check_permutation(sigma: &[usize]) -> Result<(), GeometryError> {
    let mut seen = vec![false; sigma.len()];
    for &j in sigma {
        if j >= sigma.len() || seen[j] {
            return Err(GeometryError::InvalidPermutation(format!("{sigma:?}")));
        }
        seen[j] = true;
    }
    Ok(())
}

/// Lattice-preserving action on grid functions: a planar transform acting on
/// pixel coordinates `(x, y) = (column, row)` modulo the grid size, plus a
/// permutation of channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAction {
    pub spatial: EuclideanTransform,
    /// Channel `c` of the input lands in channel `channel_perm[c]`.
    pub channel_perm: Option<Vec<usize>>,
}

impl GridAction {
    pub fn identity() -> Self {
        Self {
            spatial: EuclideanTransform::identity(2),
            channel_perm: None,
        }
    }

    pub fn shift(dx: i64, dy: i64) -> Self {
        Self {
            spatial: EuclideanTransform::translation(DVector::from_column_slice(&[dx as f64, dy as f64])),
            channel_perm: None,
        }
    }

    pub fn quarter_turn(quarter_turns: i32) -> Self {
        Self {
            spatial: EuclideanTransform::quarter_turn(quarter_turns),
            channel_perm: None,
        }
    }

    /// Axis flip; `axis = 0` mirrors columns, `axis = 1` mirrors rows.
    pub fn flip(axis: usize) -> Self {
        Self {
            spatial: EuclideanTransform::reflection(2, axis),
            channel_perm: None,
        }
    }

    pub fn channels(perm: Vec<usize>) -> Result<Self, GeometryError> {
        check_permutation(&perm)?;
        Ok(Self {
            spatial: EuclideanTransform::identity(2),
            channel_perm: Some(perm),
        })
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &GridAction) -> Result<Self, GeometryError> {
        let spatial = self.spatial.compose(&other.spatial)?;
        let channel_perm = match (&self.channel_perm, &other.channel_perm) {
            (None, None) => None,
            (Some(p), None) => Some(p.clone()),
            (None, Some(q)) => Some(q.clone()),
            (Some(p), Some(q)) => {
                if p.len() != q.len() {
                    return Err(GeometryError::InvalidPermutation(
                        "channel permutations of different lengths".into(),
                    ));
                }
                Some(q.iter().map(|&c| p[c]).collect())
            }
        };
        Ok(Self { spatial, channel_perm })
    }

    pub fn inverse(&self) -> Self {
        let channel_perm = self.channel_perm.as_ref().map(|p| {
            let mut inv = vec![0; p.len()];
            for (c, &d) in p.iter().enumerate() {
                inv[d] = c;
            }
            inv
        });
        Self {
            spatial: self.spatial.inverse(),
            channel_perm,
        }
    }
}

/// `(L_h f)(x) = f(h⁻¹ x)` on the periodic lattice, with channels permuted.
pub fn left_regular_action(h: &GridAction, f: &GridFunction) -> Result<GridFunction, GeometryError> {
    let (channels, height, width) = f.shape();
    if h.spatial.dim() != 2 {
        return Err(GeometryError::DimensionMismatch {
            expected: 2,
            actual: h.spatial.dim(),
        });
    }
    if !h.spatial.is_lattice_map() {
        return Err(GeometryError::NotLatticePreserving(
            "linear part must be a signed permutation and the shift integral".into(),
        ));
    }
    let inv = h.spatial.inverse();
    let a = inv.linear();
    let m = [
        [a[(0, 0)] as i64, a[(0, 1)] as i64],
        [a[(1, 0)] as i64, a[(1, 1)] as i64],
    ];
    if (m[0][1] != 0 || m[1][0] != 0) && height != width {
        return Err(GeometryError::NotLatticePreserving(format!(
            "axis-swapping map on a non-square {height}x{width} grid"
        )));
    }
    let s = [inv.shift()[0] as i64, inv.shift()[1] as i64];
    let inv_perm: Vec<usize> = match &h.channel_perm {
        None => (0..channels).collect(),
        Some(p) => {
            if p.len() != channels {
                return Err(GeometryError::InvalidPermutation(format!(
                    "permutation of length {} applied to {channels} channels",
                    p.len()
                )));
            }
            let mut inv = vec![0; channels];
            for (c, &d) in p.iter().enumerate() {
                inv[d] = c;
            }
            inv
        }
    };
    let mut out = GridFunction::zeros(channels, height, width)?;
    for (c, &src_c) in inv_perm.iter().enumerate() {
        for y in 0..height {
            for x in 0..width {
                let (xi, yi) = (x as i64, y as i64);
                let sx = m[0][0] * xi + m[0][1] * yi + s[0];
                let sy = m[1][0] * xi + m[1][1] * yi + s[1];
                out.set(c, y, x, f.get_wrapped(src_c, sy as isize, sx as isize));
            }
        }
    }
    Ok(out)
}
