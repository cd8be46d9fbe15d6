use crate::error::MorphError;
use crate::geometry::{ball_distance, embedded_origin_distance, GridGeometry};

use super::c_k;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistanceMode {
    /// Plain Euclidean length of the scaled pixel offset.
    Euclidean,
    /// Ball distance between the embedded offset and the reference point.
    HyperbolicEmbedded,
}

/// Which lattice offsets the inf/sup scans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Window {
    /// `(2r+1)²` offsets with periodic wrap-around.
    Periodic { radius: usize },
    /// Every grid point, no wrap-around: the lattice restriction of the
    /// infimum over the whole plane.
    Full,
}

/// Parameters of the structuring function `b_t^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuringSpec {
    k: f64,
    t: f64,
    window: Window,
    distance_mode: DistanceMode,
    metric_scale: f64,
}

impl StructuringSpec {
    pub fn new(
        k: f64,
        t: f64,
        window: Window,
        distance_mode: DistanceMode,
        metric_scale: f64,
    ) -> Result<Self, MorphError> {
        if !(k > 1.0 && k.is_finite()) {
            return Err(MorphError::InvalidExponent(k));
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(MorphError::InvalidScale(t));
        }
        if let Window::Periodic { radius: 0 } = window {
            return Err(MorphError::InvalidRadius);
        }
        if !(metric_scale > 0.0 && metric_scale.is_finite()) {
            return Err(MorphError::InvalidMetricScale(metric_scale));
        }
        Ok(Self {
            k,
            t,
            window,
            distance_mode,
            metric_scale,
        })
    }

    /// Euclidean distance, unit metric scale.
    pub fn euclidean(k: f64, t: f64, window: Window) -> Result<Self, MorphError> {
        Self::new(k, t, window, DistanceMode::Euclidean, 1.0)
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn distance_mode(&self) -> DistanceMode {
        self.distance_mode
    }

    pub fn metric_scale(&self) -> f64 {
        self.metric_scale
    }

    pub fn with_t(&self, t: f64) -> Result<Self, MorphError> {
        Self::new(self.k, t, self.window, self.distance_mode, self.metric_scale)
    }

    pub fn c_k(&self) -> f64 {
        c_k(self.k)
    }

    /// `k / (k − 1)`, the power applied to the distance.
    pub fn distance_power(&self) -> f64 {
        self.k / (self.k - 1.0)
    }

    /// `b_t^k(dist) = c_k dist^{k/(k−1)} / t^{1/(k−1)}`.
    pub fn value(&self, dist: f64) -> f64 {
        debug_assert!(dist >= 0.0);
        if dist == 0.0 {
            return 0.0;
        }
        self.c_k() * dist.powf(self.distance_power()) / self.t.powf(1.0 / (self.k - 1.0))
    }

    /// Distance attached to a pixel offset `(dx, dy)`.
    pub fn offset_distance(&self, dx: f64, dy: f64, geom: &GridGeometry) -> f64 {
        let s = self.metric_scale * geom.pixel_scale;
        let (ax, ay) = (s * dx, s * dy);
        match self.distance_mode {
            DistanceMode::Euclidean => ax.hypot(ay),
            DistanceMode::HyperbolicEmbedded => {
                let x0 = geom.base_point.coords();
                if x0.iter().all(|v| *v == 0.0) {
                    embedded_origin_distance(ax.hypot(ay))
                } else {
                    // Φ(S(x₀) + Δ) against x₀.
                    let g = (1.0 - x0.norm_squared()).max(crate::geometry::BOUNDARY_GUARD);
                    let pre = [x0[0] / g.sqrt() + ax, x0[1] / g.sqrt() + ay];
                    let n = (1.0 + pre[0] * pre[0] + pre[1] * pre[1]).sqrt();
                    ball_distance(&[pre[0] / n, pre[1] / n], x0.as_slice())
                }
            }
        }
    }

    /// Structuring value for the pixel offset `(dx, dy)`.
    pub fn offset_value(&self, dx: f64, dy: f64, geom: &GridGeometry) -> f64 {
        self.value(self.offset_distance(dx, dy, geom))
    }
}
