use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ema_update, Adam, ParamStore, Tape, Tensor};
use crate::data_io::{
    idx_dataset, load_checkpoint, load_idx_kind, make_gaussian_toy, make_synthetic_shapes, median_bandwidth,
    mmd_unbiased, rotate_dataset, save_checkpoint, tensor_to_images, write_grid, Checkpoint, CsvTable, DatasetSource,
    IdxKind, ImageDataset,
};
use crate::diffusion::{forward_sample_batch, mse, noise_batch, sample, standard_normal, DiffusionSchedule};
use crate::error::{CheckpointError, ConfigError, DataError, Error};
use crate::gmcunet::GmcUnet;
use crate::grid::GridFunction;
use crate::Result;

use super::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.echo";

const STREAM_DATA: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_MMD: u64 = 3;
const STREAM_GRID: u64 = 4;
const STREAM_INIT: u64 = 5;
const STREAM_STEPS: u64 = 1 << 32;

/// Independent random stream `stream` of the run seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples drawn per model call when generating many images.
const SAMPLE_CHUNK: usize = 64;

/// Training and held-out images for a configuration.
pub fn build_datasets(cfg: &RunConfig) -> Result<(ImageDataset, ImageDataset)> {
    let d = &cfg.dataset;
    let total = d.count + d.held_out;
    let data_seed = stream_rng(cfg.seed, STREAM_DATA).random::<u64>();
    let all = match d.source {
        DatasetSource::SyntheticShapes => make_synthetic_shapes(total, d.side, data_seed)?,
        DatasetSource::GaussianToy => make_gaussian_toy(total, d.side, d.toy_std, data_seed)?,
        DatasetSource::IdxFile => {
            let path = d.path.as_deref().expect("validated");
            let idx = load_idx_kind(path, IdxKind::Images)?;
            let ds = idx_dataset(&idx, Some(total))?;
            let side = cfg.model.image_side;
            if ds.shape().is_some_and(|s| s != (cfg.model.image_channels, side, side)) {
                return Err(ConfigError::new(
                    "dataset.path",
                    format!("images are {:?}, model expects {side}x{side}", idx.image_size()),
                )
                .into());
            }
            ds
        }
    };
    if all.len() < total {
        return Err(ConfigError::new(
            "dataset.count",
            format!("needs {total} images with held_out, source has {}", all.len()),
        )
        .into());
    }
    if let Some(shape) = all.shape() {
        if shape.0 != cfg.model.image_channels {
            return Err(ConfigError::new("model.image_channels", format!("dataset has {} channels", shape.0)).into());
        }
    }
    let all = match &d.rotation {
        Some(policy) => rotate_dataset(&all, policy, data_seed.wrapping_add(1))?,
        None => all,
    };
    Ok(all.split(d.count))
}

/// Parameters, EMA shadow and optimizer state after `step` updates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub adam: Adam<f32>,
}

/// One row of the metrics table. Evaluation columns are empty on steps
/// where they were not computed.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub eval_mse: Option<f64>,
    pub mmd: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn parse_opt(s: &str) -> Option<f64> {
    (!s.is_empty()).then(|| s.parse().ok()).flatten()
}

pub fn metrics_table(rows: &[MetricRow]) -> CsvTable {
    let mut t = CsvTable::new(["step", "loss", "eval_mse", "mmd"]);
    for r in rows {
        t.push([r.step.to_string(), fmt_opt(r.loss), fmt_opt(r.eval_mse), fmt_opt(r.mmd)]);
    }
    t
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DataError::Encode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let step = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Invalid(format!("{}: bad step column", path.display())))?;
        rows.push(MetricRow {
            step,
            loss: rec.get(1).and_then(parse_opt),
            eval_mse: rec.get(2).and_then(parse_opt),
            mmd: rec.get(3).and_then(parse_opt),
        });
    }
    Ok(rows)
}

/// A fixed noised batch used to track the noise-prediction error.
struct EvalBatch {
    noised: Tensor<f32>,
    noise: Tensor<f32>,
    steps: Vec<usize>,
}

/// Owns a run: model, data, state, metrics and output directory.
pub struct Trainer {
    config: RunConfig,
    model: GmcUnet,
    schedule: DiffusionSchedule,
    train: ImageDataset,
    held_out: ImageDataset,
    eval: EvalBatch,
    bandwidth: Option<f64>,
    state: TrainState,
    metrics: Vec<MetricRow>,
    out_dir: PathBuf,
    log: Option<Box<dyn FnMut(&MetricRow)>>,
}

impl Trainer {
    /// Fresh run: initial weights from the seed.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = GmcUnet::new(config.model.clone())?;
        let params: ParamStore<f32> = model.init_params(&mut stream_rng(config.seed, STREAM_INIT));
        let state = TrainState {
            step: 0,
            ema: params.clone(),
            adam: Adam::new(config.optimizer.adam(), &params),
            params,
        };
        Self::with_state(config, model, state, Vec::new())
    }

    /// Continues the run stored in `checkpoint`, with the configuration
    /// echoed in its header unless `config` overrides it. Metrics already
    /// in the output directory up to the checkpoint step are kept.
    pub fn resume(checkpoint: &Path, config: Option<RunConfig>) -> Result<Self> {
        let ck = load_checkpoint(checkpoint)?;
        let saved = RunConfig::from_toml(&ck.header.config)?;
        let config = config.unwrap_or(saved.clone());
        if config.model != saved.model {
            return Err(ConfigError::new("model", "differs from the configuration stored in the checkpoint").into());
        }
        let model = GmcUnet::new(config.model.clone())?;
        let state = state_from_checkpoint(&model, &ck, config.optimizer.adam())?;
        let metrics_path = config.output.dir.join(METRICS_FILE);
        let metrics = if metrics_path.exists() {
            read_metrics(&metrics_path)?
                .into_iter()
                .filter(|r| r.step <= state.step)
                .collect()
        } else {
            Vec::new()
        };
        Self::with_state(config, model, state, metrics)
    }

    fn with_state(config: RunConfig, model: GmcUnet, state: TrainState, metrics: Vec<MetricRow>) -> Result<Self> {
        let schedule = config.diffusion.schedule()?;
        let (train, held_out) = build_datasets(&config)?;
        if train.is_empty() {
            return Err(ConfigError::new("dataset.count", "training set is empty").into());
        }
        let eval = {
            let source = if held_out.is_empty() { &train } else { &held_out };
            let mut rng = stream_rng(config.seed, STREAM_EVAL);
            let n = config.output.eval_batch;
            let idx: Vec<usize> = (0..n).map(|i| i % source.len()).collect();
            let n0: Tensor<f32> = source.batch(&idx)?;
            let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
            let noise: Tensor<f32> = standard_normal(&mut rng, n0.shape());
            let noised = forward_sample_batch(&n0, &steps, &noise, &schedule)?;
            EvalBatch { noised, noise, steps }
        };
        let bandwidth = (held_out.len() >= 2).then(|| median_bandwidth(held_out.images()));
        let out_dir = config.output.dir.clone();
        Ok(Self {
            config,
            model,
            schedule,
            train,
            held_out,
            eval,
            bandwidth,
            state,
            metrics,
            out_dir,
            log: None,
        })
    }

    /// Called with every metrics row as it is produced.
    pub fn on_metrics(&mut self, f: impl FnMut(&MetricRow) + 'static) {
        self.log = Some(Box::new(f));
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &GmcUnet {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn held_out(&self) -> &ImageDataset {
        &self.held_out
    }

    /// One optimizer update on a fresh batch; returns the batch loss.
    /// Non-finite values anywhere in the update abort with the step number.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.state.step + 1;
        self.try_step(step).map_err(|e| match e {
            Error::NonFiniteLoss { .. } => e,
            e if e.is_non_finite() => Error::Diverged {
                step,
                source: Box::new(e),
            },
            e => e,
        })
    }

    fn try_step(&mut self, step: usize) -> Result<f64> {
        let mut rng = stream_rng(self.config.seed, STREAM_STEPS + step as u64);
        let batch = self.config.optimizer.batch_size;
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.train.len())).collect();
        let n0: Tensor<f32> = self.train.batch(&idx)?;
        let nb = noise_batch(&n0, &self.schedule, &mut rng)?;

        let mut tape = Tape::new();
        let vars = self.state.params.bind(&mut tape);
        let x = tape.constant(nb.noised);
        let target = tape.constant(nb.noise);
        let pred = self.model.forward(&mut tape, &vars, x, &nb.steps)?;
        let loss_var = tape.mse(pred, target)?;
        let loss = tape.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = tape.backward(loss_var)?;
        let grads = self.state.params.collect_grads(&tape, &grads, &vars);
        self.state.adam.step(&mut self.state.params, &grads)?;
        self.state.step = step;

        let o = &self.config.optimizer;
        if step.is_multiple_of(o.ema_interval) {
            if step <= o.ema_start {
                self.state.ema.assign(&self.state.params)?;
            } else {
                ema_update(&mut self.state.ema, &self.state.params, o.ema_decay)?;
            }
        }
        Ok(loss)
    }

    /// Noise-prediction MSE of the current weights on the fixed batch.
    pub fn eval_mse(&self) -> Result<f64> {
        let e = &self.eval;
        let mut out = Vec::with_capacity(e.noised.len());
        for chunk_start in (0..e.steps.len()).step_by(SAMPLE_CHUNK) {
            let end = (chunk_start + SAMPLE_CHUNK).min(e.steps.len());
            let x = slice_batch(&e.noised, chunk_start, end);
            let pred = self.model.predict(&self.state.params, &x, &e.steps[chunk_start..end])?;
            out.extend_from_slice(pred.data());
        }
        let pred = Tensor::new(e.noise.shape().to_vec(), out)?;
        Ok(mse(&e.noise, &pred))
    }

    /// `count` samples from the EMA weights using random stream `stream`.
    fn generate(&self, count: usize, stream: u64) -> Result<Vec<GridFunction>> {
        generate(
            &self.model,
            &self.state.ema,
            &self.schedule,
            count,
            &mut stream_rng(self.config.seed, stream),
        )
    }

    /// Unbiased MMD² between EMA samples and the held-out images.
    pub fn eval_mmd(&self) -> Result<f64> {
        let bandwidth = self
            .bandwidth
            .ok_or_else(|| Error::Runtime("MMD needs at least 2 held-out images".into()))?;
        let generated = self.generate(self.config.output.mmd_samples, STREAM_MMD)?;
        Ok(mmd_unbiased(&generated, self.held_out.images(), bandwidth)?)
    }

    /// Writes the effective configuration to `config.echo`.
    pub fn write_config_echo(&self) -> Result<()> {
        let path = self.out_dir.join(CONFIG_ECHO_FILE);
        std::fs::create_dir_all(&self.out_dir).map_err(|source| DataError::Io {
            path: self.out_dir.clone(),
            source,
        })?;
        std::fs::write(&path, self.config.to_toml()).map_err(|source| DataError::Io { path, source })?;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        checkpoint_from_state(&self.state, self.config.seed, self.config.to_toml())
    }

    /// Saves the checkpoint and, once there are rows, the metrics table.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.out_dir.join(CHECKPOINT_FILE);
        std::fs::create_dir_all(&self.out_dir).map_err(|source| DataError::Io {
            path: self.out_dir.clone(),
            source,
        })?;
        save_checkpoint(&path, &self.checkpoint())?;
        if !self.metrics.is_empty() {
            metrics_table(&self.metrics).write(&self.out_dir.join(METRICS_FILE))?;
        }
        Ok(path)
    }

    fn record(&mut self, row: MetricRow) {
        if let Some(log) = self.log.as_mut() {
            log(&row);
        }
        self.metrics.push(row);
    }

    /// Trains until the configured iteration count, writing metrics,
    /// sample grids and checkpoints on their cadences.
    pub fn run(&mut self) -> Result<()> {
        self.write_config_echo()?;
        let total = self.config.optimizer.iterations;
        if self.state.step == 0 && self.metrics.is_empty() && total > 0 {
            let eval = self.eval_mse()?;
            self.record(MetricRow {
                step: 0,
                loss: None,
                eval_mse: Some(eval),
                mmd: None,
            });
        }
        while self.state.step < total {
            let loss = self.step()?;
            let step = self.state.step;
            let out = self.config.output.clone();
            let eval_mse = (step.is_multiple_of(out.eval_every) || step == total)
                .then(|| self.eval_mse())
                .transpose()?;
            let mmd = (out.mmd_every > 0 && (step.is_multiple_of(out.mmd_every) || step == total))
                .then(|| self.eval_mmd())
                .transpose()?;
            self.record(MetricRow {
                step,
                loss: Some(loss),
                eval_mse,
                mmd,
            });
            if out.sample_every > 0 && step.is_multiple_of(out.sample_every) {
                let images = self.generate(out.grid_size, STREAM_GRID)?;
                write_grid(
                    &images,
                    out.grid_cols,
                    &self.out_dir.join(format!("samples_{step:06}.pgm")),
                )?;
            }
            if step.is_multiple_of(out.checkpoint_every) && step < total {
                self.save()?;
            }
        }
        self.save()?;
        Ok(())
    }
}

fn slice_batch(t: &Tensor<f32>, start: usize, end: usize) -> Tensor<f32> {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * per..end * per].to_vec()).expect("slice of a valid batch")
}

/// Ancestral samples from `params`, drawn in chunks.
pub fn generate(
    model: &GmcUnet,
    params: &ParamStore<f32>,
    schedule: &DiffusionSchedule,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GridFunction>> {
    let c = &model.config();
    let mut images = Vec::with_capacity(count);
    let predictor = |x: &Tensor<f32>, steps: &[usize]| -> Result<Tensor<f32>> { Ok(model.predict(params, x, steps)?) };
    let mut left = count;
    while left > 0 {
        let n = left.min(SAMPLE_CHUNK);
        let out = sample(
            &predictor,
            schedule,
            &[n, c.image_channels, c.image_side, c.image_side],
            rng,
            |_, _| {},
        )?;
        images.extend(tensor_to_images(&out)?);
        left -= n;
    }
    Ok(images)
}

pub fn checkpoint_from_state(state: &TrainState, seed: u64, config: String) -> Checkpoint {
    let mut ck = Checkpoint::new(state.step as u64, seed, config);
    ck.push_store("params", &state.params);
    ck.push_store("ema", &state.ema);
    for (i, name) in state.params.names().iter().enumerate() {
        ck.push(format!("adam_m.{name}"), &state.adam.first_moments()[i]);
    }
    for (i, name) in state.params.names().iter().enumerate() {
        ck.push(format!("adam_v.{name}"), &state.adam.second_moments()[i]);
    }
    ck
}

/// Restores a [`TrainState`] for `model`, refusing missing, extra or
/// misshapen arrays.
pub fn state_from_checkpoint(
    model: &GmcUnet,
    ck: &Checkpoint,
    adam: crate::autodiff::AdamConfig,
) -> Result<TrainState, CheckpointError> {
    let like: ParamStore<f32> = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let names: Vec<String> = ["params", "ema", "adam_m", "adam_v"]
        .iter()
        .flat_map(|p| like.names().iter().map(move |n| format!("{p}.{n}")))
        .collect();
    ck.check_no_extra(names.iter().map(String::as_str))?;
    let params = ck.store("params", &like)?;
    let ema = ck.store("ema", &like)?;
    let m = ck.store("adam_m", &like)?.tensors().to_vec();
    let v = ck.store("adam_v", &like)?.tensors().to_vec();
    Ok(TrainState {
        step: ck.header.step as usize,
        adam: Adam::from_state(adam, ck.header.step, m, v),
        params,
        ema,
    })
}

/// EMA weights and configuration from a checkpoint, for sampling.
pub fn load_for_sampling(path: &Path) -> Result<(RunConfig, GmcUnet, ParamStore<f32>)> {
    let ck = load_checkpoint(path)?;
    let config = RunConfig::from_toml(&ck.header.config)?;
    let model = GmcUnet::new(config.model.clone())?;
    let state = state_from_checkpoint(&model, &ck, config.optimizer.adam())?;
    Ok((config, model, state.ema))
}
