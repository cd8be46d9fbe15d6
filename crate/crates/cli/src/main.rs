//! `morphflow`: train, sample, verify and pde-lab.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use morphflow::gmcunet::BlockKind;
use morphflow::morphpde::MorphSign;
use morphflow::pipeline::{
    parse_lp_norm, run_pde_lab, run_verify, sample_checkpoint, write_pde_lab, write_samples, Mutation, PdeInit,
    PdeLabRequest, PdeMethod, RunConfig, Suite, Trainer,
};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "morphflow", version, about = "Equivariant morphological diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BlockArg {
    Cde,
    Resnet,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MutationArg {
    FlipCkSign,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a denoiser; resumes when --checkpoint is given.
    Train {
        /// TOML run configuration (default: built-in defaults, or the
        /// configuration stored in --checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint to resume from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Block type for every stage (overrides model.block).
        #[arg(long, value_enum)]
        block: Option<BlockArg>,
        /// Number of iterations (overrides optimizer.iterations).
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Draw samples from a checkpoint's EMA weights.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of images to draw.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Number of reverse steps (default: the training value).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the run's output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Tiles per grid row (default: output.grid_cols).
        #[arg(long)]
        cols: Option<usize>,
        /// Also write the batch at every tenth of the reverse process.
        #[arg(long)]
        trace: bool,
    },
    /// Run the invariant suites; exits with 3 when a check fails.
    Verify {
        #[arg(long, default_value = "all", value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for verify.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Inject a known defect to rehearse the harness.
        #[arg(long, value_enum, hide = true)]
        mutate: Option<MutationArg>,
    },
    /// Solve a morphological PDE with Hopf–Lax and/or finite differences.
    PdeLab {
        /// `bump`, `edge`, or a path to a binary PGM.
        #[arg(long, default_value = "bump")]
        init: PdeInit,
        #[arg(long, default_value_t = 2.0)]
        k: f64,
        /// Norm in the Hamiltonian: 1, 2 or inf.
        #[arg(long, default_value = "2", value_parser = parse_lp_norm)]
        p: morphflow::morphpde::LpNorm,
        #[arg(long, default_value_t = 0.25)]
        t: f64,
        /// `hopflax`, `fd` or `both`.
        #[arg(long, default_value = "both")]
        method: PdeMethod,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Solve the dilation equation instead of erosion.
        #[arg(long)]
        dilation: bool,
        #[arg(long, default_value = "runs/pde-lab")]
        out: PathBuf,
    },
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse()
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<morphflow::Error>() {
            Some(morphflow::Error::Config(_)) => EXIT_USAGE,
            _ if error.downcast_ref::<morphflow::error::ConfigError>().is_some() => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self { code, error }
    }
}

impl From<morphflow::Error> for Failure {
    fn from(e: morphflow::Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn usage(msg: String) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: anyhow::anyhow!(msg),
    }
}

fn train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    block: Option<BlockArg>,
    iterations: Option<usize>,
) -> Result<(), Failure> {
    let mut cfg = match (&config, &checkpoint) {
        (Some(path), _) => RunConfig::load(path).map_err(morphflow::Error::from)?,
        (None, Some(ck)) => {
            let ck = morphflow::data_io::load_checkpoint(ck).map_err(morphflow::Error::from)?;
            RunConfig::from_toml(&ck.header.config).map_err(morphflow::Error::from)?
        }
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output.dir = o;
    }
    if let Some(b) = block {
        cfg.model.block = match b {
            BlockArg::Cde => BlockKind::Cde,
            BlockArg::Resnet => BlockKind::Resnet,
        };
    }
    if let Some(n) = iterations {
        cfg.optimizer.iterations = n;
    }
    cfg.validate().map_err(morphflow::Error::from)?;
    let mut trainer = match &checkpoint {
        Some(ck) => Trainer::resume(ck, Some(cfg))?,
        None => Trainer::new(cfg)?,
    };
    eprintln!(
        "training {} parameters for {} iterations from step {} into {}",
        trainer.model().num_params(),
        trainer.config().optimizer.iterations,
        trainer.state().step,
        trainer.out_dir().display()
    );
    trainer.on_metrics(|row| {
        if row.eval_mse.is_some() || row.mmd.is_some() {
            let mut line = format!("step {:>6}", row.step);
            if let Some(l) = row.loss {
                line += &format!("  loss {l:.5}");
            }
            if let Some(e) = row.eval_mse {
                line += &format!("  eval_mse {e:.5}");
            }
            if let Some(m) = row.mmd {
                line += &format!("  mmd {m:.5}");
            }
            eprintln!("{line}");
        }
    });
    trainer.run()?;
    println!(
        "{}",
        trainer.out_dir().join(morphflow::pipeline::CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            checkpoint,
            block,
            iterations,
        } => train(config, seed, out, checkpoint, block, iterations).map(|_| 0),
        Command::Sample {
            checkpoint,
            count,
            steps,
            seed,
            out,
            cols,
            trace,
        } => {
            let (cfg, output) = sample_checkpoint(&checkpoint, count, steps, seed, trace)?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let written = write_samples(&dir, &output, cols.unwrap_or(cfg.output.grid_cols))?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Verify {
            suite,
            seed,
            out,
            mutate,
        } => {
            let mutation = mutate.map(|MutationArg::FlipCkSign| Mutation::FlipCkSign);
            let report = run_verify(suite, mutation, seed)?;
            println!(
                "{:<14} {:<45} {:>12} {:>12}  result",
                "suite", "check", "error", "tolerance"
            );
            for c in &report.checks {
                println!(
                    "{:<14} {:<45} {:>12.3e} {:>12.3e}  {}",
                    c.suite.to_string(),
                    c.name,
                    c.error,
                    c.tolerance,
                    if c.passed() { "pass" } else { "FAIL" }
                );
            }
            if let Some(dir) = out {
                let path = dir.join("verify.csv");
                report.to_csv().write(&path).map_err(morphflow::Error::from)?;
                println!("{}", path.display());
            }
            Ok(if report.all_passed() { 0 } else { EXIT_VERIFY })
        }
        Command::PdeLab {
            init,
            k,
            p,
            t,
            method,
            size,
            dilation,
            out,
        } => {
            if let PdeInit::Image(path) = &init {
                if !path.exists() {
                    return Err(usage(format!("--init: no such file {}", path.display())));
                }
            }
            let req = PdeLabRequest {
                init,
                k,
                norm: p,
                t,
                method,
                size,
                sign: if dilation {
                    MorphSign::Dilation
                } else {
                    MorphSign::Erosion
                },
            };
            let report = run_pde_lab(&req)?;
            let written = write_pde_lab(&out, &req, &report).context("writing pde-lab outputs")?;
            if let Some((linf, l1)) = report.gap {
                println!("linf_gap {linf:.6e}");
                println!("mean_abs_gap {l1:.6e}");
            }
            for p in written {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}
