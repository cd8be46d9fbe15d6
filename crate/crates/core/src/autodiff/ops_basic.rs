//! Elementwise arithmetic, reductions, layout ops and matrix products.

use crate::error::TensorError;

use super::tape::Op;
use super::{Scalar, Tape, Tensor, Var};

fn same_shape<F: Scalar>(tape: &Tape<F>, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::Shape {
            op,
            detail: format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        });
    }
    tape.check_inputs(op, &[a, b])
}

impl<F: Scalar> Tape<F> {
    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape(self, "add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape(self, "sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape(self, "mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (F::one() + (-x).exp()));
        self.push(v, Op::Silu(a), &[a])
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: F = t.data().iter().copied().sum();
        let m = s / F::of(t.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Matrix product of `op(a)` and `op(b)`, where `op` optionally
    /// transposes the last two axes. Rank-3 operands are batched over the
    /// leading axis.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        self.check_inputs("matmul", &[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TensorError::Shape {
            op: "matmul",
            detail: format!("{sa:?} (t={ta}) x {sb:?} (t={tb})"),
        };
        let (batch, ra, ca, rb, cb) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return Err(bad()),
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(bad());
        }
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let stride_a = if ta { (1, m) } else { (k, 1) };
            let stride_b = if tb { (1, k) } else { (n, 1) };
            for i in 0..batch {
                F::gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    stride_a,
                    &vb[i * k * n..(i + 1) * k * n],
                    stride_b,
                    F::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n, 1),
                );
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            },
            &[a, b],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, b, false, false)
    }

    /// Affine map `x wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul_t(x, w, false, true)?;
        match b {
            Some(b) => self.add_channel(y, b),
            None => Ok(y),
        }
    }

    /// Adds a per-channel bias along axis 1. `b` is `[C]` (shared across
    /// the batch) or `[B, C]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        self.check_inputs("add_channel", &[x, b])?;
        let sx = self.shape(x).to_vec();
        let sbias = self.shape(b).to_vec();
        let per_batch = match sbias.len() {
            1 if sx.len() >= 2 && sbias[0] == sx[1] => false,
            2 if sx.len() >= 2 && sbias[0] == sx[0] && sbias[1] == sx[1] => true,
            _ => {
                return Err(TensorError::Shape {
                    op: "add_channel",
                    detail: format!("bias {sbias:?} for input {sx:?}"),
                })
            }
        };
        let (batch, channels) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let mut out = self.value(x).data().to_vec();
        let bv = self.value(b).data();
        for n in 0..batch {
            for c in 0..channels {
                let bias = if per_batch { bv[n * channels + c] } else { bv[c] };
                let base = (n * channels + c) * inner;
                for o in &mut out[base..base + inner] {
                    *o = *o + bias;
                }
            }
        }
        let v = Tensor::new(sx, out)?;
        Ok(self.push(v, Op::AddChannel { x, b, per_batch }, &[x, b]))
    }

    /// Multiplies channel `c` (axis 1) by `s[c]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        self.check_inputs("mul_channel", &[x, s])?;
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(s) != [sx[1]] {
            return Err(TensorError::Shape {
                op: "mul_channel",
                detail: format!("scale {:?} for input {sx:?}", self.shape(s)),
            });
        }
        let (batch, channels) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        let mut out = self.value(x).data().to_vec();
        let sv = self.value(s).data();
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * inner;
                for o in &mut out[base..base + inner] {
                    *o = *o * sv[c];
                }
            }
        }
        let v = Tensor::new(sx, out)?;
        Ok(self.push(v, Op::MulChannel { x, s }, &[x, s]))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.check_inputs("concat", parts)?;
        let first = self.shape(parts[0]).to_vec();
        let batch = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != batch || s[2..] != first[2..] {
                return Err(TensorError::Shape {
                    op: "concat",
                    detail: format!("{s:?} vs {first:?}"),
                });
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(batch * channels * inner);
        for n in 0..batch {
            for &p in parts {
                out.extend_from_slice(self.value(p).outer(n));
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start .. start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || len == 0 || start + len > sx[1] {
            return Err(TensorError::Shape {
                op: "slice_channels",
                detail: format!("{start}..{} of {sx:?}", start + len),
            });
        }
        let inner: usize = sx[2..].iter().product();
        let mut out = Vec::with_capacity(sx[0] * len * inner);
        let data = self.value(x).data();
        for n in 0..sx[0] {
            let base = (n * sx[1] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = sx.clone();
        shape[1] = len;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::SliceChannels { x, start }, &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_inputs("softmax", &[a])?;
        let t = self.value(a);
        let n = *t.shape().last().expect("tensor has at least one axis");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax(a), &[a]))
    }

    /// Nearest-neighbour ×2 upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Shape {
                op: "upsample",
                detail: format!("{s:?}"),
            });
        }
        let (h, w) = (s[2], s[3]);
        let mut out = Vec::with_capacity(s[0] * s[1] * 4 * h * w);
        let data = self.value(x).data();
        for plane in data.chunks(h * w) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(plane[(y / 2) * w + xx / 2]);
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(v, Op::UpsampleNearest(x), &[x]))
    }

    pub(crate) fn backward_matmul(&self, op: &Op<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            ta,
            tb,
        } = *op
        else {
            unreachable!()
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        // op(A) is m×k, op(B) is k×n. d op(A) = G op(B)ᵀ, d op(B) = op(A)ᵀ G.
        let stride_a = if ta { (1, m) } else { (k, 1) };
        let stride_b = if tb { (1, k) } else { (n, 1) };
        self.accumulate(grads, a, |da| {
            // write d op(A) [m×k] straight into A's layout
            let sc = if ta { (1, m) } else { (k, 1) };
            for i in 0..batch {
                F::gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    (n, 1),
                    &vb[i * k * n..(i + 1) * k * n],
                    (stride_b.1, stride_b.0),
                    F::one(),
                    &mut da[i * m * k..(i + 1) * m * k],
                    sc,
                );
            }
        });
        self.accumulate(grads, b, |db| {
            let sc = if tb { (1, k) } else { (n, 1) };
            for i in 0..batch {
                F::gemm(
                    k,
                    m,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    (stride_a.1, stride_a.0),
                    &g[i * m * n..(i + 1) * m * n],
                    (n, 1),
                    F::one(),
                    &mut db[i * k * n..(i + 1) * k * n],
                    sc,
                );
            }
        });
    }

    pub(crate) fn backward_channel(&self, op: &Op<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match *op {
            Op::AddChannel { x, b, per_batch } => {
                let s = self.shape(x);
                let (batch, channels) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                self.accumulate(grads, x, |dx| {
                    for (d, &g) in dx.iter_mut().zip(g) {
                        *d = *d + g;
                    }
                });
                self.accumulate(grads, b, |db| {
                    for n in 0..batch {
                        for c in 0..channels {
                            let base = (n * channels + c) * inner;
                            let s: F = g[base..base + inner].iter().copied().sum();
                            let idx = if per_batch { n * channels + c } else { c };
                            db[idx] = db[idx] + s;
                        }
                    }
                });
            }
            Op::MulChannel { x, s } => {
                let shape = self.shape(x);
                let (batch, channels) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let sv = self.value(s).data();
                let xv = self.value(x).data();
                self.accumulate(grads, x, |dx| {
                    for n in 0..batch {
                        for c in 0..channels {
                            let base = (n * channels + c) * inner;
                            for i in base..base + inner {
                                dx[i] = dx[i] + g[i] * sv[c];
                            }
                        }
                    }
                });
                self.accumulate(grads, s, |ds| {
                    for n in 0..batch {
                        for c in 0..channels {
                            let base = (n * channels + c) * inner;
                            let acc: F = (base..base + inner).map(|i| g[i] * xv[i]).sum();
                            ds[c] = ds[c] + acc;
                        }
                    }
                });
            }
            _ => unreachable!(),
        }
    }

    pub(crate) fn backward_channels_layout(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out_shape = self.nodes[i].value.shape();
        let batch = out_shape[0];
        let inner: usize = out_shape[2..].iter().product();
        let total_c = out_shape[1];
        match &self.nodes[i].op {
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cp = self.shape(p)[1];
                    self.accumulate(grads, p, |dp| {
                        for n in 0..batch {
                            let src = (n * total_c + offset) * inner;
                            let dst = n * cp * inner;
                            for j in 0..cp * inner {
                                dp[dst + j] = dp[dst + j] + g[src + j];
                            }
                        }
                    });
                    offset += cp;
                }
            }
            Op::SliceChannels { x, start } => {
                let cx = self.shape(*x)[1];
                self.accumulate(grads, *x, |dx| {
                    for n in 0..batch {
                        let dst = (n * cx + start) * inner;
                        let src = n * total_c * inner;
                        for j in 0..total_c * inner {
                            dx[dst + j] = dx[dst + j] + g[src + j];
                        }
                    }
                });
            }
            _ => unreachable!(),
        }
    }

    pub(crate) fn backward_upsample(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let Op::UpsampleNearest(x) = self.nodes[i].op else {
            unreachable!()
        };
        let s = self.shape(x);
        let (h, w) = (s[2], s[3]);
        self.accumulate(grads, x, |dx| {
            for (p, dplane) in dx.chunks_mut(h * w).enumerate() {
                let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let j = (y / 2) * w + xx / 2;
                        dplane[j] = dplane[j] + gp[y * 2 * w + xx];
                    }
                }
            }
        });
    }
}

pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    // ln(1 + eˣ) = max(x, 0) + ln(1 + e^{−|x|})
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}
