//! Windowed min/max scans, learnable structuring penalties and bilinear
//! transport, the differentiable counterparts of the grid PDE solvers.

use crate::error::TensorError;
use crate::geometry::arccosh;
use crate::morphpde::c_k;

use super::tape::Op;
use super::{Scalar, Tape, Tensor, Var};

/// Which extremum a window scan takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    /// `min_δ x(p + δ) + pen(δ)`: erosion.
    Min,
    /// `max_δ x(p + δ) − pen(δ)`: dilation.
    Max,
}

/// Metric used to turn a pixel offset into a distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructuringDistance {
    /// `s · |δ|`.
    Euclidean,
    /// Hyperbolic distance from the origin to the embedded offset,
    /// `arccosh(1 + 2 s² |δ|²)`.
    Hyperbolic,
}

impl StructuringDistance {
    /// Distance and its derivative with respect to the scale.
    fn eval(self, s: f64, r: f64) -> (f64, f64) {
        match self {
            Self::Euclidean => (s * r, r),
            Self::Hyperbolic => {
                let sr = s * r;
                (arccosh(1.0 + 2.0 * sr * sr), 2.0 * r / (1.0 + sr * sr).sqrt())
            }
        }
    }
}

/// Pixel offsets `(dy, dx)` of a square window in row-major order.
pub(crate) fn window_offsets(radius: usize) -> impl Iterator<Item = (isize, isize)> {
    let r = radius as isize;
    (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dy, dx)))
}

fn four_d(tape_shape: &[usize], op: &'static str) -> Result<[usize; 4], TensorError> {
    match *tape_shape {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(TensorError::Shape {
            op,
            detail: format!("expected [B, C, H, W], got {tape_shape:?}"),
        }),
    }
}

impl<F: Scalar> Tape<F> {
    /// Periodic window scan of `x: [B, C, H, W]` with a per-channel penalty
    /// `penalty: [C, (2r+1)²]` indexed by offset in row-major order. The
    /// first offset in scan order wins ties, and the gradient flows only to
    /// the selected sample and its penalty entry.
    pub fn window(&mut self, x: Var, penalty: Var, radius: usize, kind: WindowKind) -> Result<Var, TensorError> {
        self.check_inputs("window", &[x, penalty])?;
        let [batch, channels, h, w] = four_d(self.shape(x), "window")?;
        let taps = (2 * radius + 1).pow(2);
        if radius == 0 || radius > h.min(w) || self.shape(penalty) != [channels, taps] {
            return Err(TensorError::Shape {
                op: "window",
                detail: format!(
                    "radius {radius}, input {:?}, penalty {:?}",
                    self.shape(x),
                    self.shape(penalty)
                ),
            });
        }
        let offsets: Vec<(isize, isize)> = window_offsets(radius).collect();
        let xv = self.value(x).data();
        let pv = self.value(penalty).data();
        let mut out = vec![F::zero(); xv.len()];
        let mut arg = vec![0u32; xv.len()];
        for n in 0..batch {
            for c in 0..channels {
                let plane = &xv[(n * channels + c) * h * w..(n * channels + c + 1) * h * w];
                let pen = &pv[c * taps..(c + 1) * taps];
                for y in 0..h {
                    for xx in 0..w {
                        let mut best = match kind {
                            WindowKind::Min => F::infinity(),
                            WindowKind::Max => F::neg_infinity(),
                        };
                        let mut best_o = 0u32;
                        for (o, &(dy, dx)) in offsets.iter().enumerate() {
                            let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
                            let sx = (xx as isize + dx).rem_euclid(w as isize) as usize;
                            let v = plane[sy * w + sx];
                            let better = match kind {
                                WindowKind::Min => {
                                    let cand = v + pen[o];
                                    (cand < best).then_some(cand)
                                }
                                WindowKind::Max => {
                                    let cand = v - pen[o];
                                    (cand > best).then_some(cand)
                                }
                            };
                            if let Some(cand) = better {
                                best = cand;
                                best_o = o as u32;
                            }
                        }
                        let idx = (n * channels + c) * h * w + y * w + xx;
                        out[idx] = best;
                        arg[idx] = best_o;
                    }
                }
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            v,
            Op::Window {
                x,
                penalty,
                radius,
                kind,
                arg,
            },
            &[x, penalty],
        ))
    }

    /// Structuring penalty `c_k d^{k/(k−1)} / t^{1/(k−1)}` for every window
    /// offset, per channel. `t` and `scale` are `[C]` and must be positive.
    /// The result feeds [`Tape::window`].
    pub fn structuring_penalty(
        &mut self,
        t: Var,
        scale: Var,
        k: f64,
        radius: usize,
        distance: StructuringDistance,
    ) -> Result<Var, TensorError> {
        self.check_inputs("structuring_penalty", &[t, scale])?;
        let channels = self.shape(t).iter().product::<usize>();
        if self.shape(t).len() != 1 || self.shape(scale) != [channels] {
            return Err(TensorError::Shape {
                op: "structuring_penalty",
                detail: format!("t {:?}, scale {:?}", self.shape(t), self.shape(scale)),
            });
        }
        if !(k > 1.0 && k.is_finite()) {
            return Err(TensorError::Invalid {
                op: "structuring_penalty",
                detail: format!("exponent {k} must exceed 1"),
            });
        }
        let tv = self.value(t).to_f64();
        let sv = self.value(scale).to_f64();
        if tv.iter().chain(&sv).any(|&v| v <= 0.0) {
            return Err(TensorError::Invalid {
                op: "structuring_penalty",
                detail: "time and scale must be positive".into(),
            });
        }
        let ck = c_k(k);
        let power = k / (k - 1.0);
        let mut out = Vec::with_capacity(channels * (2 * radius + 1).pow(2));
        for c in 0..channels {
            let tden = tv[c].powf(1.0 / (k - 1.0));
            for (dy, dx) in window_offsets(radius) {
                let r = (dx as f64).hypot(dy as f64);
                let (d, _) = distance.eval(sv[c], r);
                let p = if d == 0.0 { 0.0 } else { ck * d.powf(power) / tden };
                out.push(F::of(p));
            }
        }
        let taps = (2 * radius + 1).pow(2);
        let v = Tensor::new(vec![channels, taps], out)?;
        Ok(self.push(
            v,
            Op::StructuringPenalty {
                t,
                scale,
                k,
                radius,
                distance,
            },
            &[t, scale],
        ))
    }

    /// Per-channel bilinear transport `out(p) = x(p − time · v_c)` with
    /// periodic wrap-around; `velocity: [C, 2]` holds `(vx, vy)`.
    pub fn shift(&mut self, x: Var, velocity: Var, time: f64) -> Result<Var, TensorError> {
        self.check_inputs("shift", &[x, velocity])?;
        let [batch, channels, h, w] = four_d(self.shape(x), "shift")?;
        if self.shape(velocity) != [channels, 2] || !time.is_finite() {
            return Err(TensorError::Shape {
                op: "shift",
                detail: format!("velocity {:?} for {channels} channels", self.shape(velocity)),
            });
        }
        let xv = self.value(x).data();
        let vel = self.value(velocity).to_f64();
        let mut out = vec![F::zero(); xv.len()];
        for c in 0..channels {
            let st = Stencil::new(-time * vel[2 * c], -time * vel[2 * c + 1], h, w);
            for n in 0..batch {
                let base = (n * channels + c) * h * w;
                let plane = &xv[base..base + h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let (idx, wts) = st.at(y, xx);
                        out[base + y * w + xx] = (0..4).map(|j| F::of(wts[j]) * plane[idx[j]]).sum();
                    }
                }
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(v, Op::Shift { x, velocity, time }, &[x, velocity]))
    }

    pub(crate) fn backward_window(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let Op::Window {
            x,
            penalty,
            radius,
            kind,
            ref arg,
        } = self.nodes[i].op
        else {
            unreachable!()
        };
        let [batch, channels, h, w] = four_d(self.shape(x), "window").expect("validated");
        let taps = (2 * radius + 1).pow(2);
        let offsets: Vec<(isize, isize)> = window_offsets(radius).collect();
        self.accumulate(grads, x, |dx| {
            for n in 0..batch {
                for c in 0..channels {
                    let base = (n * channels + c) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let idx = base + y * w + xx;
                            let (dy, ddx) = offsets[arg[idx] as usize];
                            let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
                            let sx = (xx as isize + ddx).rem_euclid(w as isize) as usize;
                            dx[base + sy * w + sx] = dx[base + sy * w + sx] + g[idx];
                        }
                    }
                }
            }
        });
        self.accumulate(grads, penalty, |dp| {
            for (idx, (&a, &gg)) in arg.iter().zip(g).enumerate() {
                let c = (idx / (h * w)) % channels;
                let j = c * taps + a as usize;
                dp[j] = match kind {
                    WindowKind::Min => dp[j] + gg,
                    WindowKind::Max => dp[j] - gg,
                };
            }
        });
    }

    pub(crate) fn backward_penalty(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let Op::StructuringPenalty {
            t,
            scale,
            k,
            radius,
            distance,
        } = self.nodes[i].op
        else {
            unreachable!()
        };
        let tv = self.value(t).to_f64();
        let sv = self.value(scale).to_f64();
        let pen = self.nodes[i].value.to_f64();
        let taps = (2 * radius + 1).pow(2);
        let ck = c_k(k);
        let power = k / (k - 1.0);
        self.accumulate(grads, t, |dt| {
            for c in 0..tv.len() {
                let acc: f64 = (0..taps)
                    .map(|o| g[c * taps + o].as_f64() * -pen[c * taps + o] / ((k - 1.0) * tv[c]))
                    .sum();
                dt[c] = dt[c] + F::of(acc);
            }
        });
        self.accumulate(grads, scale, |ds| {
            for c in 0..sv.len() {
                let tden = tv[c].powf(1.0 / (k - 1.0));
                let acc: f64 = window_offsets(radius)
                    .enumerate()
                    .map(|(o, (dy, dx))| {
                        let r = (dx as f64).hypot(dy as f64);
                        let (d, dd) = distance.eval(sv[c], r);
                        if d == 0.0 {
                            return 0.0;
                        }
                        let dpen = power * ck * d.powf(power - 1.0) / tden * dd;
                        g[c * taps + o].as_f64() * dpen
                    })
                    .sum();
                ds[c] = ds[c] + F::of(acc);
            }
        });
    }

    pub(crate) fn backward_shift(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let Op::Shift { x, velocity, time } = self.nodes[i].op else {
            unreachable!()
        };
        let [batch, channels, h, w] = four_d(self.shape(x), "shift").expect("validated");
        let xv = self.value(x).data();
        let vel = self.value(velocity).to_f64();
        let stencils: Vec<Stencil> = (0..channels)
            .map(|c| Stencil::new(-time * vel[2 * c], -time * vel[2 * c + 1], h, w))
            .collect();
        self.accumulate(grads, x, |dx| {
            for (c, st) in stencils.iter().enumerate() {
                for n in 0..batch {
                    let base = (n * channels + c) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let gg = g[base + y * w + xx];
                            let (idx, wts) = st.at(y, xx);
                            for j in 0..4 {
                                let d = &mut dx[base + idx[j]];
                                *d = *d + F::of(wts[j]) * gg;
                            }
                        }
                    }
                }
            }
        });
        self.accumulate(grads, velocity, |dv| {
            for (c, st) in stencils.iter().enumerate() {
                let (mut gx, mut gy) = (0.0, 0.0);
                for n in 0..batch {
                    let base = (n * channels + c) * h * w;
                    let plane = &xv[base..base + h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let gg = g[base + y * w + xx].as_f64();
                            let (idx, _) = st.at(y, xx);
                            let v: [f64; 4] = idx.map(|j| plane[j].as_f64());
                            let (ax, ay) = (st.ax, st.ay);
                            // ∂/∂(sample x), ∂/∂(sample y); sample = p − time·v
                            let dsx = (1.0 - ay) * (v[1] - v[0]) + ay * (v[3] - v[2]);
                            let dsy = (1.0 - ax) * (v[2] - v[0]) + ax * (v[3] - v[1]);
                            gx -= time * dsx * gg;
                            gy -= time * dsy * gg;
                        }
                    }
                }
                dv[2 * c] = dv[2 * c] + F::of(gx);
                dv[2 * c + 1] = dv[2 * c + 1] + F::of(gy);
            }
        });
    }
}

/// Bilinear weights for a constant fractional displacement `(ox, oy)`.
/// Corners are ordered `(y0,x0), (y0,x1), (y1,x0), (y1,x1)`.
struct Stencil {
    ix: isize,
    iy: isize,
    ax: f64,
    ay: f64,
    h: usize,
    w: usize,
}

impl Stencil {
    fn new(ox: f64, oy: f64, h: usize, w: usize) -> Self {
        let (fx, fy) = (ox.floor(), oy.floor());
        Self {
            ix: fx as isize,
            iy: fy as isize,
            ax: ox - fx,
            ay: oy - fy,
            h,
            w,
        }
    }

    fn at(&self, y: usize, x: usize) -> ([usize; 4], [f64; 4]) {
        let (h, w) = (self.h as isize, self.w as isize);
        let y0 = (y as isize + self.iy).rem_euclid(h) as usize;
        let y1 = (y as isize + self.iy + 1).rem_euclid(h) as usize;
        let x0 = (x as isize + self.ix).rem_euclid(w) as usize;
        let x1 = (x as isize + self.ix + 1).rem_euclid(w) as usize;
        let (ax, ay) = (self.ax, self.ay);
        (
            [y0 * self.w + x0, y0 * self.w + x1, y1 * self.w + x0, y1 * self.w + x1],
            [(1.0 - ay) * (1.0 - ax), (1.0 - ay) * ax, ay * (1.0 - ax), ay * ax],
        )
    }
}

impl<F: Scalar> Tape<F> {
    /// Flat source pixel (within its channel plane) selected by every
    /// output element of a [`Tape::window`] node.
    pub fn window_sources(&self, v: Var) -> Option<Vec<usize>> {
        let Op::Window { x, radius, ref arg, .. } = self.nodes[v.0].op else {
            return None;
        };
        let [_, _, h, w] = four_d(self.shape(x), "window").ok()?;
        let offsets: Vec<(isize, isize)> = window_offsets(radius).collect();
        Some(
            arg.iter()
                .enumerate()
                .map(|(idx, &a)| {
                    let p = idx % (h * w);
                    let (y, xx) = ((p / w) as isize, (p % w) as isize);
                    let (dy, dx) = offsets[a as usize];
                    let sy = (y + dy).rem_euclid(h as isize) as usize;
                    let sx = (xx + dx).rem_euclid(w as isize) as usize;
                    sy * w + sx
                })
                .collect(),
        )
    }
}
