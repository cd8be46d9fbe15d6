use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::data_io::{DatasetSource, RotationPolicy};
use crate::diffusion::{DiffusionSchedule, ScheduleKind};
use crate::error::ConfigError;
use crate::gmcunet::UNetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// IDX image file, for `source = "idx_file"`.
    pub path: Option<PathBuf>,
    /// Number of training images (for IDX files, a limit).
    pub count: usize,
    /// Images held out for evaluation, drawn on top of `count`.
    pub held_out: usize,
    /// Side of generated images; IDX images must match the model side.
    pub side: usize,
    /// Pixel standard deviation of the Gaussian toy data.
    pub toy_std: f64,
    pub rotation: Option<RotationPolicy>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::SyntheticShapes,
            path: None,
            count: 1000,
            held_out: 256,
            side: 28,
            toy_std: 0.5,
            rotation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule, ConfigError> {
        DiffusionSchedule::new(self.steps, self.beta_start, self.beta_end, ScheduleKind::Linear)
            .map_err(|e| ConfigError::new("diffusion", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
    /// Iterations between EMA updates.
    pub ema_interval: usize,
    /// Before this iteration the EMA shadow tracks the weights exactly.
    pub ema_start: usize,
    pub batch_size: usize,
    pub iterations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            ema_decay: 0.995,
            ema_interval: 10,
            ema_start: 0,
            batch_size: 32,
            iterations: 2000,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Iterations between sample grids (0 disables them).
    pub sample_every: usize,
    /// Images per sample grid.
    pub grid_size: usize,
    pub grid_cols: usize,
    /// Iterations between ε-MSE evaluations on the fixed held-out batch.
    pub eval_every: usize,
    /// Size of the fixed evaluation batch.
    pub eval_batch: usize,
    /// Iterations between MMD evaluations (0 disables them).
    pub mmd_every: usize,
    /// Generated images per MMD evaluation.
    pub mmd_samples: usize,
    /// Iterations between checkpoints; the final state is always saved.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            sample_every: 500,
            grid_size: 16,
            grid_cols: 4,
            eval_every: 100,
            eval_batch: 64,
            mmd_every: 1000,
            mmd_samples: 256,
            checkpoint_every: 500,
        }
    }
}

/// Everything a run needs. Parsed from TOML; omitted keys take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: UNetConfig,
    pub diffusion: DiffusionConfig,
    pub optimizer: OptimizerConfig,
    pub output: OutputConfig,
}

/// Dotted key of the `key = value` line containing byte `offset`.
fn key_at(text: &str, offset: usize) -> String {
    let offset = offset.min(text.len());
    let line_start = text[..offset].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let section = text[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let trimmed = line.trim();
    if trimmed.starts_with('[') {
        return trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
    }
    let key = trimmed.split('=').next().unwrap_or("").trim().trim_matches('"');
    match section {
        Some(sec) if !key.is_empty() => format!("{sec}.{key}"),
        Some(sec) => sec,
        None => key.to_string(),
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(key, format!("must be a positive number, got {v}")))
    }
}

fn nonzero(key: &str, v: usize) -> Result<(), ConfigError> {
    if v > 0 {
        Ok(())
    } else {
        Err(ConfigError::new(key, "must be at least 1"))
    }
}

fn unit_interval(key: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::new(key, format!("must lie in [0, 1), got {v}")))
    }
}

impl RunConfig {
    /// Parses and validates TOML text.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| key_at(text, s.start)).unwrap_or_default();
            ConfigError::new(
                if key.is_empty() { "<document>".into() } else { key },
                e.message().trim().to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The effective configuration as TOML; parses back to `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if d.source == DatasetSource::IdxFile && d.path.is_none() {
            return Err(ConfigError::new(
                "dataset.path",
                "required when dataset.source = \"idx_file\"",
            ));
        }
        if d.source != DatasetSource::IdxFile && d.side != self.model.image_side {
            return Err(ConfigError::new(
                "dataset.side",
                format!("{} does not match model.image_side {}", d.side, self.model.image_side),
            ));
        }
        if d.source != DatasetSource::IdxFile && d.side < 8 {
            return Err(ConfigError::new(
                "dataset.side",
                format!("must be at least 8, got {}", d.side),
            ));
        }
        nonzero("dataset.count", d.count)?;
        positive("dataset.toy_std", d.toy_std)?;
        match &d.rotation {
            Some(RotationPolicy::Angles { degrees })
                if degrees.is_empty() || degrees.iter().any(|a| !a.is_finite()) =>
            {
                return Err(ConfigError::new(
                    "dataset.rotation.degrees",
                    "needs at least one finite angle",
                ));
            }
            Some(RotationPolicy::Range { min, max }) if !(min < max && max.is_finite() && min.is_finite()) => {
                return Err(ConfigError::new(
                    "dataset.rotation",
                    format!("empty range [{min}, {max})"),
                ));
            }
            _ => {}
        }

        self.model
            .validate()
            .map_err(|e| ConfigError::new("model", e.to_string()))?;

        let f = &self.diffusion;
        nonzero("diffusion.steps", f.steps)?;
        positive("diffusion.beta_start", f.beta_start)?;
        positive("diffusion.beta_end", f.beta_end)?;
        if f.beta_end >= 1.0 {
            return Err(ConfigError::new(
                "diffusion.beta_end",
                format!("must be < 1, got {}", f.beta_end),
            ));
        }
        self.diffusion.schedule()?;

        let o = &self.optimizer;
        positive("optimizer.lr", o.lr)?;
        unit_interval("optimizer.beta1", o.beta1)?;
        unit_interval("optimizer.beta2", o.beta2)?;
        positive("optimizer.eps", o.eps)?;
        unit_interval("optimizer.ema_decay", o.ema_decay)?;
        nonzero("optimizer.ema_interval", o.ema_interval)?;
        nonzero("optimizer.batch_size", o.batch_size)?;

        let out = &self.output;
        if out.dir.as_os_str().is_empty() {
            return Err(ConfigError::new("output.dir", "must not be empty"));
        }
        nonzero("output.grid_size", out.grid_size)?;
        nonzero("output.grid_cols", out.grid_cols)?;
        nonzero("output.eval_every", out.eval_every)?;
        nonzero("output.eval_batch", out.eval_batch)?;
        nonzero("output.checkpoint_every", out.checkpoint_every)?;
        if out.mmd_every > 0 {
            if out.mmd_samples < 2 {
                return Err(ConfigError::new("output.mmd_samples", "must be at least 2"));
            }
            if d.held_out < 2 {
                return Err(ConfigError::new(
                    "dataset.held_out",
                    "MMD needs at least 2 held-out images",
                ));
            }
        }
        Ok(())
    }
}
