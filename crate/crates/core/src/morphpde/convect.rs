use crate::error::MorphError;
use crate::grid::GridFunction;

/// Constant per-channel velocity field and transport time.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvectionSpec {
    /// `(vx, vy)` per channel, in pixels per unit time.
    pub velocity: Vec<[f64; 2]>,
    pub time: f64,
}

impl ConvectionSpec {
    pub fn uniform(channels: usize, velocity: [f64; 2], time: f64) -> Self {
        Self {
            velocity: vec![velocity; channels],
            time,
        }
    }
}

/// Periodic bilinear sample of one channel at fractional position `(x, y)`.
pub(crate) fn bilinear_periodic(f: &GridFunction, c: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let ax = x - x0;
    let ay = y - y0;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let v00 = f.get_wrapped(c, yi, xi);
    let v01 = f.get_wrapped(c, yi, xi + 1);
    let v10 = f.get_wrapped(c, yi + 1, xi);
    let v11 = f.get_wrapped(c, yi + 1, xi + 1);
    (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11)
}

/// Solution of the transport equation along a constant field by
/// characteristics: `u(x, t) = f(x − t·c)`, sampled bilinearly with
/// periodic wrap-around.
pub fn convect(f: &GridFunction, spec: &ConvectionSpec) -> Result<GridFunction, MorphError> {
    let (channels, height, width) = f.shape();
    if spec.velocity.len() != channels {
        return Err(MorphError::VelocityCount {
            expected: channels,
            actual: spec.velocity.len(),
        });
    }
    if !spec.time.is_finite() || spec.velocity.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MorphError::NonFiniteVelocity);
    }
    let mut out = GridFunction::zeros(channels, height, width)?;
    for c in 0..channels {
        let [vx, vy] = spec.velocity[c];
        let (sx, sy) = (spec.time * vx, spec.time * vy);
        for y in 0..height {
            for x in 0..width {
                out.set(c, y, x, bilinear_periodic(f, c, x as f64 - sx, y as f64 - sy));
            }
        }
    }
    Ok(out)
}
