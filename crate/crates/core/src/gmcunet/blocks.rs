//! Residual blocks and self-attention.

use crate::autodiff::{Padding, Scalar, StructuringDistance, Tape, Var, WindowKind};
use crate::error::{ModelError, TensorError};

use super::layers::{Conv, Init, Linear, Norm, Registry};

/// Plain residual block: two 3×3 convolutions with a time bias between.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        temb: usize,
        groups: usize,
        padding: Padding,
    ) -> Self {
        reg.scope(name, |reg| Self {
            norm1: Norm::new(reg, "norm1", cin, groups),
            conv1: Conv::new(reg, "conv1", cin, cout, 3, 1, padding, true, false),
            time: Linear::new(reg, "time", temb, cout),
            norm2: Norm::new(reg, "norm2", cout, groups),
            conv2: Conv::new(reg, "conv2", cout, cout, 3, 1, padding, true, false),
            skip: (cin != cout).then(|| Conv::new(reg, "skip", cin, cout, 1, 1, padding, true, false)),
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], x: Var, temb: Var) -> Result<Var, TensorError> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, p, h)?;
        let e = tape.silu(temb);
        let e = self.time.forward(tape, p, e)?;
        let h = tape.add_channel(h, e)?;
        let h = self.norm2.forward(tape, p, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(tape, p, x)?,
            None => x,
        };
        tape.add(skip, h)
    }
}

/// Settings shared by every convection–dilation–erosion block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdeSettings {
    /// Exponent of the structuring function (> 1).
    pub k: f64,
    pub radius: usize,
    pub distance: StructuringDistance,
    /// Multiplies pixel offsets before the distance is taken.
    pub metric_scale: f64,
    /// Transport time of the convection step.
    pub convection_time: f64,
}

/// Residual block `x + W_out(λ_d·dil(z) + λ_e·ero(z) + λ_s·z)` with
/// `z = convect(norm(W_in x) + proj(e_t))`.
#[derive(Clone, Debug)]
pub(crate) struct CdeBlock {
    w_in: Conv,
    norm: Norm,
    time: Option<Linear>,
    velocity: usize,
    scale_raw: usize,
    lambda_dil: usize,
    lambda_ero: usize,
    lambda_skip: usize,
    w_out: Conv,
    settings: CdeSettings,
    channels: usize,
}

/// Softplus preimage of 1, so learned scales start at `t = 1`.
const UNIT_SOFTPLUS: f64 = 0.541_324_854_612_918_1;

impl CdeBlock {
    pub fn new(
        reg: &mut Registry,
        name: &str,
        channels: usize,
        temb: Option<usize>,
        groups: usize,
        settings: CdeSettings,
    ) -> Self {
        reg.scope(name, |reg| Self {
            w_in: Conv::new(reg, "w_in", channels, channels, 1, 1, Padding::Zero, true, false),
            norm: Norm::new(reg, "norm", channels, groups),
            time: temb.map(|d| Linear::new(reg, "time", d, channels)),
            velocity: reg.param("velocity", &[channels, 2], Init::Zeros),
            scale_raw: reg.param("scale_raw", &[channels], Init::Constant(UNIT_SOFTPLUS)),
            lambda_dil: reg.param("lambda_dil", &[channels], Init::Constant(1.0 / 3.0)),
            lambda_ero: reg.param("lambda_ero", &[channels], Init::Constant(1.0 / 3.0)),
            lambda_skip: reg.param("lambda_skip", &[channels], Init::Constant(1.0 / 3.0)),
            w_out: Conv::new(reg, "w_out", channels, channels, 1, 1, Padding::Zero, true, true),
            settings,
            channels,
        })
    }

    /// The block with an already projected time bias `bias: [B, C]`.
    pub fn forward_with_bias<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        p: &[Var],
        x: Var,
        bias: Var,
    ) -> Result<Var, TensorError> {
        let s = self.settings;
        let h = self.w_in.forward(tape, p, x)?;
        let h = self.norm.forward(tape, p, h)?;
        let h = tape.add_channel(h, bias)?;
        let z = tape.shift(h, p[self.velocity], s.convection_time)?;
        let t = tape.softplus(p[self.scale_raw]);
        let metric = tape.constant(crate::autodiff::Tensor::full(&[self.channels], F::of(s.metric_scale)));
        let pen = tape.structuring_penalty(t, metric, s.k, s.radius, s.distance)?;
        let dil = tape.window(z, pen, s.radius, WindowKind::Max)?;
        let ero = tape.window(z, pen, s.radius, WindowKind::Min)?;
        let dil = tape.mul_channel(dil, p[self.lambda_dil])?;
        let ero = tape.mul_channel(ero, p[self.lambda_ero])?;
        let skip = tape.mul_channel(z, p[self.lambda_skip])?;
        let mix = tape.add(dil, ero)?;
        let mix = tape.add(mix, skip)?;
        let out = self.w_out.forward(tape, p, mix)?;
        tape.add(x, out)
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], x: Var, temb: Var) -> Result<Var, TensorError> {
        let time = self.time.as_ref().expect("block built with a time projection");
        let e = tape.silu(temb);
        let bias = time.forward(tape, p, e)?;
        self.forward_with_bias(tape, p, x, bias)
    }
}

/// Multi-head self-attention over the spatial token grid, with residual:
/// `x + W_o · attend(W_q x, W_k x, W_v x)`.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    qkv: Conv,
    out: Conv,
    heads: usize,
}

impl Attention {
    pub fn new(reg: &mut Registry, name: &str, channels: usize, heads: usize) -> Result<Self, ModelError> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(ModelError::Config(format!(
                "{channels} channels are not divisible into {heads} attention heads"
            )));
        }
        Ok(reg.scope(name, |reg| Self {
            qkv: Conv::new(reg, "qkv", channels, 3 * channels, 1, 1, Padding::Zero, false, false),
            out: Conv::new(reg, "out", channels, channels, 1, 1, Padding::Zero, false, false),
            heads,
        }))
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        let [b, c, h, w] = <[usize; 4]>::try_from(tape.shape(x)).map_err(|_| TensorError::Shape {
            op: "attention",
            detail: format!("{:?}", tape.shape(x)),
        })?;
        let dh = c / self.heads;
        let n = h * w;
        let qkv = self.qkv.forward(tape, p, x)?;
        let part = |tape: &mut Tape<F>, i: usize| -> Result<Var, TensorError> {
            let s = tape.slice_channels(qkv, i * c, c)?;
            tape.reshape(s, &[b * self.heads, dh, n])
        };
        let q = part(tape, 0)?;
        let k = part(tape, 1)?;
        let v = part(tape, 2)?;
        let scores = tape.matmul_t(q, k, true, false)?;
        let scores = tape.scale(scores, F::of(1.0 / (dh as f64).sqrt()));
        let attn = tape.softmax(scores)?;
        let mixed = tape.matmul_t(v, attn, false, true)?;
        let mixed = tape.reshape(mixed, &[b, c, h, w])?;
        let o = self.out.forward(tape, p, mixed)?;
        tape.add(x, o)
    }
}

/// A residual block of the middle stage.
#[derive(Clone, Debug)]
pub(crate) enum MiddleBlock {
    Cde(CdeBlock),
    Res(ResBlock),
}

impl MiddleBlock {
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], x: Var, temb: Var) -> Result<Var, TensorError> {
        match self {
            Self::Cde(b) => b.forward(tape, p, x, temb),
            Self::Res(b) => b.forward(tape, p, x, temb),
        }
    }
}
