use std::path::Path;

use morphflow::data_io::{load_checkpoint, read_pgm, DatasetSource};
use morphflow::gmcunet::BlockKind;
use morphflow::pipeline::{
    decile_steps, read_metrics, respace, run_pde_lab, run_verify, sample_checkpoint, write_samples, Mutation, PdeInit,
    PdeLabRequest, PdeMethod, RunConfig, Suite, Trainer, CHECKPOINT_FILE, CONFIG_ECHO_FILE, METRICS_FILE,
};
use morphflow::Error;

fn tiny_config(dir: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 3
[dataset]
count = 24
held_out = 8
side = 8
[model]
image_side = 8
base_channels = 4
stages = 1
window_radius = 2
attention = false
groups = 2
time_features = 8
[diffusion]
steps = 20
[optimizer]
batch_size = 4
iterations = 6
lr = 1e-3
ema_interval = 2
[output]
dir = "{}"
eval_every = 2
eval_batch = 8
mmd_every = 3
mmd_samples = 4
sample_every = 3
grid_size = 3
grid_cols = 2
checkpoint_every = 4
"#,
        dir.display()
    );
    RunConfig::from_toml(&text).unwrap()
}

fn train(cfg: RunConfig) -> Trainer {
    let mut t = Trainer::new(cfg).unwrap();
    t.run().unwrap();
    t
}

#[test]
fn config_echo_parses_back_to_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.optimizer.iterations = 0;
    let t = train(cfg.clone());
    let echo = std::fs::read_to_string(t.out_dir().join(CONFIG_ECHO_FILE)).unwrap();
    assert_eq!(RunConfig::from_toml(&echo).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn config_errors_name_the_offending_key() {
    let cases = [
        ("[optimizer]\nlr = \"fast\"\n", "optimizer.lr"),
        ("[model]\nunknown_knob = 1\n", "model"),
        ("[diffusion]\nsteps = 0\n", "diffusion.steps"),
        ("[dataset]\nsource = \"idx_file\"\n", "dataset.path"),
        ("[dataset]\nside = 16\n", "dataset.side"),
    ];
    for (text, key) in cases {
        let err = RunConfig::from_toml(text).unwrap_err();
        assert!(err.key.starts_with(key), "{text:?} gave key {:?}", err.key);
    }
}

#[test]
fn zero_iterations_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.optimizer.iterations = 0;
    let t = train(cfg);
    assert_eq!(t.state().step, 0);
    assert!(t.metrics().is_empty());
    let ck = load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.header.step, 0);
    assert!(!dir.path().join(METRICS_FILE).exists());
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let names = [
        CHECKPOINT_FILE,
        METRICS_FILE,
        "samples_000003.pgm",
        "samples_000006.pgm",
    ];
    train(tiny_config(dir.path()));
    let first: Vec<Vec<u8>> = names
        .iter()
        .map(|n| std::fs::read(dir.path().join(n)).unwrap())
        .collect();
    for n in names {
        std::fs::remove_file(dir.path().join(n)).unwrap();
    }
    train(tiny_config(dir.path()));
    for (name, bytes) in names.iter().zip(&first) {
        assert!(
            &std::fs::read(dir.path().join(name)).unwrap() == bytes,
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run_bit_for_bit() {
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    // The split lands where every cadence fires, so the first leg's
    // closing evaluation matches the uninterrupted run's row.
    let with_iterations = |dir: &Path, n: usize| {
        let mut cfg = tiny_config(dir);
        cfg.optimizer.iterations = n;
        cfg
    };
    train(with_iterations(full.path(), 8));
    train(with_iterations(split.path(), 6));
    let mut resumed = Trainer::resume(
        &split.path().join(CHECKPOINT_FILE),
        Some(with_iterations(split.path(), 8)),
    )
    .unwrap();
    assert_eq!(resumed.state().step, 6);
    resumed.run().unwrap();

    let a = load_checkpoint(&full.path().join(CHECKPOINT_FILE)).unwrap();
    let b = load_checkpoint(&split.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(a.header.step, b.header.step);
    assert_eq!(a.arrays.len(), b.arrays.len());
    for (x, y) in a.arrays.iter().zip(&b.arrays) {
        assert_eq!(x.name, y.name);
        let same = x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits());
        assert!(same, "array {} differs after resume", x.name);
    }
    assert_eq!(
        read_metrics(&full.path().join(METRICS_FILE)).unwrap(),
        read_metrics(&split.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.optimizer.iterations = 0;
    train(cfg.clone());
    cfg.model.base_channels = 8;
    let err = Trainer::resume(&dir.path().join(CHECKPOINT_FILE), Some(cfg))
        .err()
        .unwrap();
    assert!(matches!(err, Error::Config(ref c) if c.key == "model"), "{err}");
}

#[test]
fn diverging_run_reports_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.optimizer.lr = 1e30;
    cfg.optimizer.iterations = 20;
    let mut t = Trainer::new(cfg).unwrap();
    let err = t.run().expect_err("training must diverge");
    assert!(err.is_non_finite(), "{err}");
    let step = match err {
        Error::NonFiniteLoss { step } | Error::Diverged { step, .. } => step,
        other => panic!("unexpected {other}"),
    };
    assert!((1..=20).contains(&step));
    assert!(!dir.path().join(CHECKPOINT_FILE).exists());
}

#[test]
fn gaussian_toy_loss_goes_down() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.dataset.source = DatasetSource::GaussianToy;
    cfg.optimizer.iterations = 60;
    cfg.optimizer.batch_size = 8;
    cfg.output.eval_every = 60;
    cfg.output.mmd_every = 0;
    cfg.output.sample_every = 0;
    let t = train(cfg);
    let evals: Vec<f64> = t.metrics().iter().filter_map(|r| r.eval_mse).collect();
    assert!(evals.last().unwrap() < evals.first().unwrap(), "{evals:?}");
}

#[test]
fn resnet_arm_trains_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.model.block = BlockKind::Resnet;
    let t = train(cfg);
    assert_eq!(t.state().step, 6);
    let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(rows.first().unwrap().step, 0);
    assert!(rows.iter().filter(|r| r.mmd.is_some()).count() >= 2);
    assert!(dir.path().join("samples_000006.pgm").exists());
}

#[test]
fn sampling_is_seeded_and_writes_one_tile_per_image() {
    let dir = tempfile::tempdir().unwrap();
    train(tiny_config(dir.path()));
    let ck = dir.path().join(CHECKPOINT_FILE);

    let (_, one) = sample_checkpoint(&ck, 1, None, Some(5), false).unwrap();
    assert_eq!(one.images.len(), 1);
    let out = dir.path().join("one");
    write_samples(&out, &one, 4).unwrap();
    let grid = read_pgm(&out.join("samples.pgm")).unwrap();
    assert_eq!((grid.height(), grid.width()), (8, 8));

    let (_, a) = sample_checkpoint(&ck, 3, Some(5), Some(9), true).unwrap();
    let (_, b) = sample_checkpoint(&ck, 3, Some(5), Some(9), true).unwrap();
    assert_eq!(a.images, b.images);
    let traced: Vec<usize> = a.trace.iter().map(|(t, _)| *t).collect();
    assert_eq!(traced, decile_steps(5));
    assert!(sample_checkpoint(&ck, 0, None, None, false).is_err());
}

#[test]
fn respacing_keeps_cumulative_products_at_picked_steps() {
    let cfg = RunConfig::default();
    let train = cfg.diffusion.schedule().unwrap();
    let full = respace(&train, train.steps()).unwrap();
    assert_eq!(full.training_step, (1..=train.steps()).collect::<Vec<_>>());
    let r = respace(&train, 10).unwrap();
    assert_eq!(r.training_step.len(), 10);
    assert_eq!(*r.training_step.last().unwrap(), train.steps());
    for (i, &t) in r.training_step.iter().enumerate() {
        let rel = (r.schedule.alpha_bar(i + 1) - train.alpha_bar(t)).abs() / train.alpha_bar(t);
        assert!(rel < 1e-12, "step {t}: {rel}");
    }
    assert!(respace(&train, 0).is_err());
    assert!(respace(&train, train.steps() + 1).is_err());
}

#[test]
fn verify_passes_and_the_mutation_is_caught_by_the_oracle() {
    let clean = run_verify(Suite::All, None, 0).unwrap();
    let failed: Vec<_> = clean.failures().map(|c| c.name.clone()).collect();
    assert!(failed.is_empty(), "{failed:?}");

    let mutated = run_verify(Suite::Morphology, Some(Mutation::FlipCkSign), 0).unwrap();
    assert!(!mutated.get("hopf_lax_vs_finite_difference_linf").unwrap().passed());
    assert!(mutated.get("dilation_erosion_duality_bitwise").unwrap().passed());
    let again = run_verify(Suite::Morphology, None, 0).unwrap();
    assert!(again.all_passed(), "mutation leaked past its scope");
}

#[test]
fn pde_lab_solvers_agree_on_the_bump() {
    let report = run_pde_lab(&PdeLabRequest::default()).unwrap();
    let (linf, mean_abs) = report.gap.unwrap();
    assert!(linf <= 0.05, "{linf}");
    assert!(mean_abs <= linf);
}

#[test]
fn pde_lab_rejects_bad_parameters() {
    for req in [
        PdeLabRequest {
            t: 0.0,
            ..Default::default()
        },
        PdeLabRequest {
            k: 1.0,
            ..Default::default()
        },
        PdeLabRequest {
            size: 1,
            ..Default::default()
        },
    ] {
        assert!(matches!(run_pde_lab(&req), Err(Error::Config(_))), "{req:?}");
    }
}

#[test]
fn pde_lab_keeps_a_constant_image_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.pgm");
    let mut bytes = b"P5\n# flat\n5 4\n255\n".to_vec();
    bytes.extend(std::iter::repeat_n(200u8, 20));
    std::fs::write(&path, bytes).unwrap();
    let report = run_pde_lab(&PdeLabRequest {
        init: PdeInit::Image(path),
        method: PdeMethod::Both,
        ..Default::default()
    })
    .unwrap();
    let expected = 200.0 / 127.5 - 1.0;
    for g in [report.hopf_lax.unwrap(), report.fd.unwrap()] {
        assert!(g.as_slice().iter().all(|v| (v - expected).abs() < 1e-12));
    }
}
