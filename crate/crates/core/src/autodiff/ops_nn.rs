//! Convolution and group normalisation.

use crate::error::TensorError;

use super::tape::Op;
use super::{Scalar, Tape, Var};

/// Border handling for convolutions with "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap around, so the convolution commutes with cyclic shifts.
    Periodic,
}

const NO_SOURCE: u32 = u32::MAX;

/// Source pixel for every `(ky, kx, oy, ox)`; `NO_SOURCE` marks zero padding.
struct ColumnMap {
    index: Vec<u32>,
    out_h: usize,
    out_w: usize,
}

impl ColumnMap {
    fn new(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Self {
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let out_h = (h - 1) / stride + 1;
        let out_w = (w - 1) / stride + 1;
        let mut index = Vec::with_capacity(kh * kw * out_h * out_w);
        for ky in 0..kh {
            for kx in 0..kw {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let y = (oy * stride + ky) as isize - ph;
                        let x = (ox * stride + kx) as isize - pw;
                        let inside = (0..h as isize).contains(&y) && (0..w as isize).contains(&x);
                        let src = match (inside, padding) {
                            (true, _) => (y as usize * w + x as usize) as u32,
                            (false, Padding::Zero) => NO_SOURCE,
                            (false, Padding::Periodic) => {
                                let yy = y.rem_euclid(h as isize) as usize;
                                let xx = x.rem_euclid(w as isize) as usize;
                                (yy * w + xx) as u32
                            }
                        };
                        index.push(src);
                    }
                }
            }
        }
        Self { index, out_h, out_w }
    }

    fn taps(&self) -> usize {
        self.out_h * self.out_w
    }

    /// `cols[(ci·kk + tap), p]` from one `[Cin, H, W]` image.
    fn im2col<F: Scalar>(&self, img: &[F], cin: usize, hw: usize, cols: &mut [F]) {
        let kk_p = self.index.len();
        for ci in 0..cin {
            let plane = &img[ci * hw..(ci + 1) * hw];
            let dst = &mut cols[ci * kk_p..(ci + 1) * kk_p];
            for (d, &s) in dst.iter_mut().zip(&self.index) {
                *d = if s == NO_SOURCE { F::zero() } else { plane[s as usize] };
            }
        }
    }

    fn col2im<F: Scalar>(&self, cols: &[F], cin: usize, hw: usize, img: &mut [F]) {
        let kk_p = self.index.len();
        for ci in 0..cin {
            let plane = &mut img[ci * hw..(ci + 1) * hw];
            let src = &cols[ci * kk_p..(ci + 1) * kk_p];
            for (&v, &s) in src.iter().zip(&self.index) {
                if s != NO_SOURCE {
                    plane[s as usize] = plane[s as usize] + v;
                }
            }
        }
    }
}

fn conv_shapes(
    sx: &[usize],
    sw: &[usize],
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize), TensorError> {
    let bad = |detail: String| TensorError::Shape { op: "conv2d", detail };
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
        return Err(bad(format!("input {sx:?}, weight {sw:?}")));
    }
    if sw[2].is_multiple_of(2) || sw[3].is_multiple_of(2) || stride == 0 {
        return Err(bad(format!("kernel {sw:?} must be odd, stride {stride} positive")));
    }
    Ok((sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3]))
}

impl<F: Scalar> Tape<F> {
    /// 2-D cross-correlation with "same" padding (`kernel / 2` on each side).
    ///
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]` with odd kernel sides,
    /// optional `b: [Cout]`. Output is `[B, Cout, ⌈H/stride⌉, ⌈W/stride⌉]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.check_inputs("conv2d", &inputs)?;
        let (batch, cin, h, wd, cout, kh, kw) = conv_shapes(self.shape(x), self.shape(w), stride)?;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::Shape {
                    op: "conv2d",
                    detail: format!("bias {:?} for {cout} outputs", self.shape(b)),
                });
            }
        }
        let map = ColumnMap::new(h, wd, kh, kw, stride, padding);
        let p = map.taps();
        let kdim = cin * kh * kw;
        let mut cols = vec![F::zero(); kdim * p];
        let mut out = vec![F::zero(); batch * cout * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for n in 0..batch {
                map.im2col(&xv[n * cin * h * wd..(n + 1) * cin * h * wd], cin, h * wd, &mut cols);
                let o = &mut out[n * cout * p..(n + 1) * cout * p];
                F::gemm(cout, kdim, p, wv, (kdim, 1), &cols, (p, 1), F::zero(), o, (p, 1));
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (co, row) in o.chunks_mut(p).enumerate() {
                        for v in row {
                            *v = *v + bv[co];
                        }
                    }
                }
            }
        }
        let v = super::Tensor::new(vec![batch, cout, map.out_h, map.out_w], out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    /// Group normalisation over `[B, C, ...]` with per-channel affine
    /// parameters `gamma, beta: [C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var, TensorError> {
        self.check_inputs("group_norm", &[x, gamma, beta])?;
        let s = self.shape(x).to_vec();
        if s.len() < 2
            || groups == 0
            || !s[1].is_multiple_of(groups)
            || self.shape(gamma) != [s[1]]
            || self.shape(beta) != [s[1]]
        {
            return Err(TensorError::Shape {
                op: "group_norm",
                detail: format!(
                    "input {s:?}, {groups} groups, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        let (batch, channels) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let cpg = channels / groups;
        let span = cpg * inner;
        let eps = F::of(1e-5);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::zero(); xv.len()];
        let mut means = Vec::with_capacity(batch * groups);
        let mut rstds = Vec::with_capacity(batch * groups);
        let nf = F::of(span as f64);
        for n in 0..batch {
            for g in 0..groups {
                let base = (n * channels + g * cpg) * inner;
                let seg = &xv[base..base + span];
                let mean = seg.iter().copied().sum::<F>() / nf;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
                let rstd = F::one() / (var + eps).sqrt();
                for (j, &v) in seg.iter().enumerate() {
                    let c = g * cpg + j / inner;
                    out[base + j] = (v - mean) * rstd * gv[c] + bv[c];
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let v = super::Tensor::new(s, out)?;
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    pub(crate) fn backward_conv2d(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
        } = self.nodes[i].op
        else {
            unreachable!()
        };
        let (batch, cin, h, wd, cout, kh, kw) =
            conv_shapes(self.shape(x), self.shape(w), stride).expect("validated in forward");
        let map = ColumnMap::new(h, wd, kh, kw, stride, padding);
        let p = map.taps();
        let kdim = cin * kh * kw;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = vec![F::zero(); kdim * p];
        if let Some(b) = b {
            self.accumulate(grads, b, |db| {
                for n in 0..batch {
                    for (co, row) in g[n * cout * p..(n + 1) * cout * p].chunks(p).enumerate() {
                        db[co] = db[co] + row.iter().copied().sum::<F>();
                    }
                }
            });
        }
        if self.requires_grad(w) {
            self.accumulate(grads, w, |dw| {
                for n in 0..batch {
                    map.im2col(&xv[n * cin * h * wd..(n + 1) * cin * h * wd], cin, h * wd, &mut cols);
                    let gn = &g[n * cout * p..(n + 1) * cout * p];
                    // dW += G · colsᵀ
                    F::gemm(cout, p, kdim, gn, (p, 1), &cols, (1, p), F::one(), dw, (kdim, 1));
                }
            });
        }
        if self.requires_grad(x) {
            self.accumulate(grads, x, |dx| {
                for n in 0..batch {
                    let gn = &g[n * cout * p..(n + 1) * cout * p];
                    // dcols = Wᵀ · G
                    F::gemm(kdim, cout, p, wv, (1, kdim), gn, (p, 1), F::zero(), &mut cols, (p, 1));
                    map.col2im(&cols, cin, h * wd, &mut dx[n * cin * h * wd..(n + 1) * cin * h * wd]);
                }
            });
        }
    }

    pub(crate) fn backward_group_norm(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            ref mean,
            ref rstd,
        } = self.nodes[i].op
        else {
            unreachable!()
        };
        let s = self.shape(x);
        let (batch, channels) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let cpg = channels / groups;
        let span = cpg * inner;
        let nf = F::of(span as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let xhat = |n: usize, grp: usize, j: usize| {
            let base = (n * channels + grp * cpg) * inner;
            (xv[base + j] - mean[n * groups + grp]) * rstd[n * groups + grp]
        };
        self.accumulate(grads, beta, |db| {
            for (idx, &gg) in g.iter().enumerate() {
                let c = (idx / inner) % channels;
                db[c] = db[c] + gg;
            }
        });
        self.accumulate(grads, gamma, |dg| {
            for n in 0..batch {
                for grp in 0..groups {
                    let base = (n * channels + grp * cpg) * inner;
                    for j in 0..span {
                        let c = grp * cpg + j / inner;
                        dg[c] = dg[c] + g[base + j] * xhat(n, grp, j);
                    }
                }
            }
        });
        self.accumulate(grads, x, |dx| {
            for n in 0..batch {
                for grp in 0..groups {
                    let base = (n * channels + grp * cpg) * inner;
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..span {
                        let dxh = g[base + j] * gv[grp * cpg + j / inner];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat(n, grp, j);
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    let r = rstd[n * groups + grp];
                    for j in 0..span {
                        let dxh = g[base + j] * gv[grp * cpg + j / inner];
                        dx[base + j] = dx[base + j] + r * (dxh - m1 - xhat(n, grp, j) * m2);
                    }
                }
            }
        });
    }
}
