use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::data_io::{tensor_to_images, write_grid};
use crate::diffusion::{sample, DiffusionSchedule};
use crate::error::ConfigError;
use crate::grid::GridFunction;
use crate::Result;

use super::config::RunConfig;
use super::train::{load_for_sampling, stream_rng};

/// Random stream used by the `sample` command.
const STREAM_SAMPLE: u64 = 6;

/// Reverse-process schedule over a subsequence of the training steps.
///
/// With `steps = T` this is the training schedule. Otherwise `steps`
/// training steps are picked evenly, their cumulative products are kept and
/// the per-step variances follow from them, so the model is still queried
/// at the training step it learned.
#[derive(Clone, Debug)]
pub struct Respaced {
    pub schedule: DiffusionSchedule,
    /// Training step for each step of `schedule` (1-based, index `t − 1`).
    pub training_step: Vec<usize>,
}

pub fn respace(train: &DiffusionSchedule, steps: usize) -> Result<Respaced> {
    let total = train.steps();
    if steps == 0 || steps > total {
        return Err(ConfigError::new("steps", format!("must be in 1..={total}, got {steps}")).into());
    }
    if steps == total {
        return Ok(Respaced {
            schedule: train.clone(),
            training_step: (1..=total).collect(),
        });
    }
    let picked: Vec<usize> = (1..=steps)
        .map(|i| ((i as f64 * total as f64 / steps as f64).round() as usize).clamp(1, total))
        .collect();
    let mut betas = Vec::with_capacity(steps);
    let mut prev = 1.0;
    for &t in &picked {
        let ab = train.alpha_bar(t);
        betas.push(1.0 - ab / prev);
        prev = ab;
    }
    Ok(Respaced {
        schedule: DiffusionSchedule::from_betas(betas)?,
        training_step: picked,
    })
}

/// Generated images plus, when traced, the batch at decile steps.
#[derive(Clone, Debug, Default)]
pub struct SampleOutput {
    pub images: Vec<GridFunction>,
    /// `(t, images)` for `t = T, 0.9T, …, 0`, rounded.
    pub trace: Vec<(usize, Vec<GridFunction>)>,
}

pub fn decile_steps(total: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (0..=10)
        .rev()
        .map(|j| (j as f64 * total as f64 / 10.0).round() as usize)
        .collect();
    steps.dedup();
    steps
}

/// Draws `count` images from a checkpoint's EMA weights.
pub fn sample_checkpoint(
    checkpoint: &Path,
    count: usize,
    steps: Option<usize>,
    seed: Option<u64>,
    trace: bool,
) -> Result<(RunConfig, SampleOutput)> {
    if count == 0 {
        return Err(ConfigError::new("--count", "must be at least 1").into());
    }
    let (config, model, ema) = load_for_sampling(checkpoint)?;
    let train = config.diffusion.schedule()?;
    let spaced = respace(&train, steps.unwrap_or(train.steps()))?;
    let mut rng = stream_rng(seed.unwrap_or(config.seed), STREAM_SAMPLE);
    let map = &spaced.training_step;
    let predictor = |x: &Tensor<f32>, ts: &[usize]| -> Result<Tensor<f32>> {
        let mapped: Vec<usize> = ts.iter().map(|&t| map[t - 1]).collect();
        Ok(model.predict(&ema, x, &mapped)?)
    };
    let deciles = if trace {
        decile_steps(spaced.schedule.steps())
    } else {
        Vec::new()
    };
    let mut traced: Vec<(usize, Tensor<f32>)> = Vec::new();
    let c = model.config();
    let shape = [count, c.image_channels, c.image_side, c.image_side];
    let out = sample(&predictor, &spaced.schedule, &shape, &mut rng, |t, n| {
        if deciles.contains(&t) {
            traced.push((t, n.clone()));
        }
    })?;
    let trace = traced
        .into_iter()
        .map(|(t, n)| Ok((t, tensor_to_images(&n)?)))
        .collect::<Result<_>>()?;
    Ok((
        config,
        SampleOutput {
            images: tensor_to_images(&out)?,
            trace,
        },
    ))
}

/// Writes `samples.pgm` and one `trace_tNNNN.pgm` per traced step.
pub fn write_samples(dir: &Path, output: &SampleOutput, cols: usize) -> Result<Vec<PathBuf>> {
    let cols = cols.max(1).min(output.images.len().max(1));
    let mut written = Vec::new();
    let path = dir.join("samples.pgm");
    write_grid(&output.images, cols, &path)?;
    written.push(path);
    for (t, images) in &output.trace {
        let path = dir.join(format!("trace_t{t:04}.pgm"));
        write_grid(images, cols, &path)?;
        written.push(path);
    }
    Ok(written)
}
