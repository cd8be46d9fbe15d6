//! The denoising network `ε_θ(n_t, t)`.
//!
//! A U-Net: a 3×3 stem, one residual block and a stride-2 convolution per
//! encoder stage, a middle stage of residual blocks around a self-attention
//! layer, and a mirrored decoder (nearest-neighbour ×2 upsampling, 3×3
//! convolution, concatenation with the encoder skip, residual block). The
//! middle blocks are convection–dilation–erosion blocks by default and can
//! be swapped for plain residual blocks.
//!
//! Parameters live outside the model in a [`ParamStore`] whose order is
//! fixed by [`GmcUnet::param_names`]; [`GmcUnet::forward`] takes them as
//! tape variables so the same graph serves training, inference and
//! gradient checks.

mod blocks;
mod layers;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, ParamStore, Scalar, StructuringDistance, Tape, Tensor, Var};
use crate::error::ModelError;

pub use blocks::CdeSettings;
pub use layers::sinusoidal_features;

use blocks::{Attention, CdeBlock, MiddleBlock, ResBlock};
use layers::{Conv, Norm, Registry, TimeEmbedding};

/// Residual block used in the middle stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    #[default]
    Cde,
    Resnet,
}

/// Metric for structuring functions, as written in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Euclidean,
    #[default]
    Hyperbolic,
}

impl From<DistanceKind> for StructuringDistance {
    fn from(d: DistanceKind) -> Self {
        match d {
            DistanceKind::Euclidean => StructuringDistance::Euclidean,
            DistanceKind::Hyperbolic => StructuringDistance::Hyperbolic,
        }
    }
}

/// Convolution border handling, as written in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PaddingKind {
    Zero,
    #[default]
    Periodic,
}

impl From<PaddingKind> for Padding {
    fn from(p: PaddingKind) -> Self {
        match p {
            PaddingKind::Zero => Padding::Zero,
            PaddingKind::Periodic => Padding::Periodic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub image_channels: usize,
    pub image_side: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; the last entry repeats
    /// for deeper levels.
    pub channel_mults: Vec<usize>,
    /// Number of stride-2 downsamplings.
    pub stages: usize,
    pub attention: bool,
    pub heads: usize,
    pub middle_blocks: usize,
    pub block: BlockKind,
    pub k: f64,
    pub window_radius: usize,
    pub distance_mode: DistanceKind,
    pub metric_scale: f64,
    pub convection_time: f64,
    pub padding: PaddingKind,
    pub groups: usize,
    /// Size of the sinusoidal time features.
    pub time_features: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            image_side: 28,
            base_channels: 32,
            channel_mults: vec![1, 2],
            stages: 2,
            attention: true,
            heads: 4,
            middle_blocks: 2,
            block: BlockKind::Cde,
            k: 2.0,
            window_radius: 3,
            distance_mode: DistanceKind::Hyperbolic,
            metric_scale: 0.5,
            convection_time: 1.0,
            padding: PaddingKind::Periodic,
            groups: 8,
            time_features: 32,
        }
    }
}

impl UNetConfig {
    /// Channels at resolution level `level` (0 = full resolution).
    pub fn channels_at(&self, level: usize) -> usize {
        let m = self.channel_mults[level.min(self.channel_mults.len() - 1)];
        self.base_channels * m
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.image_channels == 0 || self.base_channels == 0 || self.image_side == 0 {
            return bad("image_channels, image_side and base_channels must be positive".into());
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be a non-empty list of positive integers".into());
        }
        if !self.image_side.is_multiple_of(1 << self.stages) {
            return bad(format!(
                "image_side {} is not divisible by 2^{} (stages)",
                self.image_side, self.stages
            ));
        }
        if !(self.k > 1.0 && self.k.is_finite()) {
            return bad(format!("k must be finite and > 1, got {}", self.k));
        }
        let lowest = self.image_side >> self.stages;
        if self.block == BlockKind::Cde && (self.window_radius == 0 || self.window_radius > lowest) {
            return bad(format!(
                "window_radius {} must be in 1..={lowest} (side at the middle stage)",
                self.window_radius
            ));
        }
        if !(self.metric_scale > 0.0 && self.metric_scale.is_finite()) {
            return bad(format!("metric_scale must be positive, got {}", self.metric_scale));
        }
        if !self.convection_time.is_finite() {
            return bad("convection_time must be finite".into());
        }
        if self.groups == 0 {
            return bad("groups must be positive".into());
        }
        if self.time_features < 4 || !self.time_features.is_multiple_of(2) {
            return bad(format!(
                "time_features must be even and >= 4, got {}",
                self.time_features
            ));
        }
        let mid = self.channels_at(self.stages);
        if self.attention && (self.heads == 0 || !mid.is_multiple_of(self.heads)) {
            return bad(format!(
                "{mid} middle channels are not divisible by {} heads",
                self.heads
            ));
        }
        Ok(())
    }

    fn cde_settings(&self) -> CdeSettings {
        CdeSettings {
            k: self.k,
            radius: self.window_radius,
            distance: self.distance_mode.into(),
            metric_scale: self.metric_scale,
            convection_time: self.convection_time,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    block: ResBlock,
    down: Conv,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Conv,
    block: ResBlock,
}

/// The network structure; parameters are supplied separately.
#[derive(Clone, Debug)]
pub struct GmcUnet {
    config: UNetConfig,
    specs: Vec<layers::ParamSpec>,
    time: TimeEmbedding,
    stem: Conv,
    encoder: Vec<EncoderStage>,
    middle_pre: Vec<MiddleBlock>,
    attention: Option<Attention>,
    middle_post: Vec<MiddleBlock>,
    decoder: Vec<DecoderStage>,
    head_norm: Norm,
    head: Conv,
}

impl GmcUnet {
    pub fn new(config: UNetConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut reg = Registry::default();
        let pad: Padding = config.padding.into();
        let temb = 4 * config.base_channels;
        let g = config.groups;
        let time = TimeEmbedding::new(&mut reg, config.time_features, temb);
        let c0 = config.channels_at(0);
        let stem = Conv::new(&mut reg, "stem", config.image_channels, c0, 3, 1, pad, true, false);
        let encoder = (0..config.stages)
            .map(|i| {
                reg.scope(&format!("down{i}"), |reg| {
                    let c = config.channels_at(i);
                    EncoderStage {
                        block: ResBlock::new(reg, "res", c, c, temb, g, pad),
                        down: Conv::new(reg, "down", c, config.channels_at(i + 1), 3, 2, pad, true, false),
                    }
                })
            })
            .collect();
        let cm = config.channels_at(config.stages);
        let settings = config.cde_settings();
        let middle = |reg: &mut Registry, i: usize| match config.block {
            BlockKind::Cde => MiddleBlock::Cde(CdeBlock::new(reg, &format!("mid{i}"), cm, Some(temb), g, settings)),
            BlockKind::Resnet => MiddleBlock::Res(ResBlock::new(reg, &format!("mid{i}"), cm, cm, temb, g, pad)),
        };
        let split = config.middle_blocks / 2;
        let middle_pre = (0..split).map(|i| middle(&mut reg, i)).collect();
        let attention = if config.attention {
            Some(Attention::new(&mut reg, "attn", cm, config.heads)?)
        } else {
            None
        };
        let middle_post = (split..config.middle_blocks).map(|i| middle(&mut reg, i)).collect();
        let decoder = (0..config.stages)
            .rev()
            .map(|i| {
                reg.scope(&format!("up{i}"), |reg| {
                    let c = config.channels_at(i);
                    DecoderStage {
                        up: Conv::new(reg, "up", config.channels_at(i + 1), c, 3, 1, pad, true, false),
                        block: ResBlock::new(reg, "res", 2 * c, c, temb, g, pad),
                    }
                })
            })
            .collect();
        let head_norm = Norm::new(&mut reg, "head_norm", c0, g);
        let head = Conv::new(&mut reg, "head", c0, config.image_channels, 3, 1, pad, true, false);
        Ok(Self {
            config,
            specs: reg.specs,
            time,
            stem,
            encoder,
            middle_pre,
            attention,
            middle_post,
            decoder,
            head_norm,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.specs.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn param_shapes(&self) -> Vec<&[usize]> {
        self.specs.iter().map(|s| s.shape.as_slice()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Fresh parameters drawn from `rng`.
    pub fn init_params<F: Scalar>(&self, rng: &mut ChaCha8Rng) -> ParamStore<F> {
        Registry::init(&self.specs, rng)
    }

    /// Checks that `params` has this model's names and shapes, in order.
    pub fn check_params<F: Scalar>(&self, params: &ParamStore<F>) -> Result<(), ModelError> {
        if params.len() != self.specs.len() {
            return Err(ModelError::ParamCount {
                expected: self.specs.len(),
                actual: params.len(),
            });
        }
        for (spec, (name, t)) in self.specs.iter().zip(params.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter `{name}` {:?} does not match `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// `ε̂ = ε_θ(x, t)` for `x: [B, C, side, side]` and one step per sample.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &[Var],
        x: Var,
        steps: &[usize],
    ) -> Result<Var, ModelError> {
        if params.len() != self.specs.len() {
            return Err(ModelError::ParamCount {
                expected: self.specs.len(),
                actual: params.len(),
            });
        }
        let shape = tape.shape(x).to_vec();
        let side = self.config.image_side;
        if shape.len() != 4 || shape[1..] != [self.config.image_channels, side, side] {
            return Err(ModelError::InputShape {
                expected: vec![
                    shape.first().copied().unwrap_or(0),
                    self.config.image_channels,
                    side,
                    side,
                ],
                actual: shape,
            });
        }
        if steps.len() != shape[0] {
            return Err(ModelError::StepCount {
                steps: steps.len(),
                batch: shape[0],
            });
        }
        let p = params;
        let temb = self.time.forward(tape, p, steps)?;
        let mut h = self.stem.forward(tape, p, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            h = stage.block.forward(tape, p, h, temb)?;
            skips.push(h);
            h = stage.down.forward(tape, p, h)?;
        }
        for b in &self.middle_pre {
            h = b.forward(tape, p, h, temb)?;
        }
        if let Some(a) = &self.attention {
            h = a.forward(tape, p, h)?;
        }
        for b in &self.middle_post {
            h = b.forward(tape, p, h, temb)?;
        }
        for stage in &self.decoder {
            let up = tape.upsample_nearest(h)?;
            let up = stage.up.forward(tape, p, up)?;
            let skip = skips.pop().expect("one skip per stage");
            let cat = tape.concat_channels(&[up, skip])?;
            h = stage.block.forward(tape, p, cat, temb)?;
        }
        let h = self.head_norm.forward(tape, p, h)?;
        let h = tape.silu(h);
        Ok(self.head.forward(tape, p, h)?)
    }

    /// Inference without gradients.
    pub fn predict<F: Scalar>(
        &self,
        params: &ParamStore<F>,
        x: &Tensor<F>,
        steps: &[usize],
    ) -> Result<Tensor<F>, ModelError> {
        let mut tape = Tape::new();
        let vars = params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv, steps)?;
        Ok(tape.value(out).clone())
    }
}

/// A single convection–dilation–erosion block with its own parameters,
/// for testing the block in isolation. The time bias is an input.
#[derive(Clone, Debug)]
pub struct CdeLayer {
    block: CdeBlock,
    specs: Vec<layers::ParamSpec>,
}

impl CdeLayer {
    pub fn new(channels: usize, groups: usize, settings: CdeSettings) -> Self {
        let mut reg = Registry::default();
        let block = CdeBlock::new(&mut reg, "cde", channels, None, groups, settings);
        Self {
            block,
            specs: reg.specs,
        }
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.specs.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn init_params<F: Scalar>(&self, rng: &mut ChaCha8Rng) -> ParamStore<F> {
        Registry::init(&self.specs, rng)
    }

    /// `x: [B, C, H, W]`, `bias: [B, C]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, params: &[Var], x: Var, bias: Var) -> Result<Var, ModelError> {
        Ok(self.block.forward_with_bias(tape, params, x, bias)?)
    }
}
