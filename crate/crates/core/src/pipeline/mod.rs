//! End-to-end runs behind the command-line tool: configuration, the
//! training loop, sampling, the verification suites and the PDE lab.

mod config;
mod pde_lab;
mod sample;
mod train;
mod verify;

pub use config::{DatasetConfig, DiffusionConfig, OptimizerConfig, OutputConfig, RunConfig};
pub use pde_lab::{
    initial_condition, parse_lp_norm, run_pde_lab, write_pde_lab, PdeInit, PdeLabReport, PdeLabRequest, PdeMethod,
    FD_CFL,
};
pub use sample::{decile_steps, respace, sample_checkpoint, write_samples, Respaced, SampleOutput};
pub use train::{
    build_datasets, checkpoint_from_state, generate, load_for_sampling, metrics_table, read_metrics,
    state_from_checkpoint, stream_rng, MetricRow, TrainState, Trainer, CHECKPOINT_FILE, CONFIG_ECHO_FILE, METRICS_FILE,
};
pub use verify::{finite_difference_error, run_verify, smooth_bump, Check, Mutation, Suite, VerifyReport};
