use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Padding, ParamStore, StructuringDistance, Tape, Tensor, Var, WindowKind};
use crate::data_io::CsvTable;
use crate::diffusion::{
    forward_step, gaussian_optimal_predictor, kl_term, posterior_mean, sample, standard_normal, DiffusionSchedule,
};
use crate::geometry::{ball_distance, embed, embed_jacobian, left_regular_action, unembed, GridAction, GridGeometry};
use crate::gmcunet::{CdeLayer, CdeSettings, GmcUnet, UNetConfig};
use crate::grid::GridFunction;
use crate::morphpde::{
    convect, dilate, erode, fault, fd_hj_solve, hopf_lax_solve, ConvectionSpec, DistanceMode, LpNorm, MorphPdeProblem,
    MorphSign, StructuringSpec, Window,
};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Geometry,
    Morphology,
    Equivariance,
    Gradients,
    Diffusion,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 6] = [
        "geometry",
        "morphology",
        "equivariance",
        "gradients",
        "diffusion",
        "all",
    ];

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "geometry" => Self::Geometry,
            "morphology" => Self::Morphology,
            "equivariance" => Self::Equivariance,
            "gradients" => Self::Gradients,
            "diffusion" => Self::Diffusion,
            "all" => Self::All,
            _ => {
                return Err(format!(
                    "unknown suite `{s}`; expected one of {}",
                    Self::NAMES.join(", ")
                ))
            }
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [
            Self::Geometry,
            Self::Morphology,
            Self::Equivariance,
            Self::Gradients,
            Self::Diffusion,
            Self::All,
        ]
        .iter()
        .position(|s| s == self)
        .expect("listed");
        f.write_str(Self::NAMES[i])
    }
}

/// Deliberate defects for rehearsing the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Negates `c_k` in every structuring function.
    FlipCkSign,
}

/// One measured check: passes when `error ≤ tolerance`.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(["suite", "check", "error", "tolerance", "passed"]);
        for c in &self.checks {
            t.push([
                c.suite.to_string(),
                c.name.clone(),
                format!("{:e}", c.error),
                format!("{:e}", c.tolerance),
                c.passed().to_string(),
            ]);
        }
        t
    }
}

struct Recorder {
    suite: Suite,
    checks: Vec<Check>,
}

impl Recorder {
    fn check(&mut self, name: &str, error: f64, tolerance: f64) {
        // NaN errors must fail.
        let error = if error.is_nan() { f64::INFINITY } else { error };
        self.checks.push(Check {
            suite: self.suite,
            name: name.to_string(),
            error,
            tolerance,
        });
    }
}

/// Runs the selected suites, seeded, optionally with a mutation active on
/// this thread.
pub fn run_verify(suite: Suite, mutation: Option<Mutation>, seed: u64) -> Result<VerifyReport> {
    let _guard = mutation.map(|Mutation::FlipCkSign| fault::FlipCkSign::new());
    let mut report = VerifyReport::default();
    type SuiteFn = fn(&mut Recorder, &mut ChaCha8Rng) -> Result<()>;
    let suites: [(Suite, SuiteFn); 5] = [
        (Suite::Geometry, geometry_checks),
        (Suite::Morphology, morphology_checks),
        (Suite::Equivariance, equivariance_checks),
        (Suite::Gradients, gradient_checks),
        (Suite::Diffusion, diffusion_checks),
    ];
    for (i, (s, run)) in suites.into_iter().enumerate() {
        if suite.includes(s) {
            let mut rec = Recorder {
                suite: s,
                checks: Vec::new(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            run(&mut rec, &mut rng)?;
            report.checks.extend(rec.checks);
        }
    }
    Ok(report)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniformly random point of the ball with norm at most `max_norm`.
fn ball_point(rng: &mut ChaCha8Rng, n: usize, max_norm: f64) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| normal(rng));
    let r = max_norm * rng.random::<f64>().powf(1.0 / n as f64);
    v.normalize() * r
}

/// Random orthogonal matrix: Q of a Gaussian matrix, with a random
/// coordinate permutation and reflection on top.
fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let q = DMatrix::from_fn(n, n, |_, _| normal(rng)).qr().q();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let p = DMatrix::from_fn(n, n, |i, j| {
        if perm[i] == j {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        }
    });
    p * q
}

fn geometry_checks(rec: &mut Recorder, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut worst: f64 = 0.0;
    for n in [2, 3] {
        for _ in 0..1000 {
            let (x, y) = (ball_point(rng, n, 0.95), ball_point(rng, n, 0.95));
            let q = random_orthogonal(rng, n);
            let (qx, qy) = (&q * &x, &q * &y);
            let d0 = ball_distance(x.as_slice(), y.as_slice());
            let d1 = ball_distance(qx.as_slice(), qy.as_slice());
            worst = worst.max((d1 - d0).abs());
        }
    }
    rec.check("ball_distance_isometry_invariance", worst, 1e-12);

    let (mut there_back, mut back_there, mut jac, mut zero_dets) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for i in 0..1000 {
        let n = 2 + i % 2;
        let x = DVector::from_fn(n, |_, _| 2.0 * normal(rng));
        let round = unembed(&embed(&x))?;
        there_back = there_back.max((round - &x).amax());
        let p = ball_point(rng, n, 0.9);
        let s = unembed(&crate::geometry::HyperbolicPoint::new(p.clone())?)?;
        back_there = back_there.max((embed(&s).coords() - &p).amax());

        let j = embed_jacobian(&x);
        let h = 1e-6;
        let fd = DMatrix::from_fn(n, n, |r, c| {
            let mut up = x.clone();
            let mut down = x.clone();
            up[c] += h;
            down[c] -= h;
            (embed(&up).coords()[r] - embed(&down).coords()[r]) / (2.0 * h)
        });
        jac = jac.max((&j - &fd).amax() / j.amax());
        if j.determinant() == 0.0 {
            zero_dets += 1;
        }
    }
    rec.check("unembed_after_embed", there_back, 1e-12);
    rec.check("embed_after_unembed", back_there, 1e-12);
    rec.check("embed_jacobian_vs_finite_differences", jac, 1e-6);
    rec.check("embed_jacobian_zero_determinants", zero_dets as f64, 0.0);
    Ok(())
}

fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> GridFunction {
    GridFunction::from_fn(c, h, w, |_, _, _| rng.random_range(-2.0..2.0)).expect("nonempty")
}

fn random_spec(rng: &mut ChaCha8Rng, max_radius: usize) -> Result<StructuringSpec> {
    let mode = if rng.random::<bool>() {
        DistanceMode::Euclidean
    } else {
        DistanceMode::HyperbolicEmbedded
    };
    Ok(StructuringSpec::new(
        rng.random_range(1.2..3.0),
        rng.random_range(0.2..2.0),
        Window::Periodic {
            radius: rng.random_range(1..=max_radius),
        },
        mode,
        rng.random_range(0.3..1.5),
    )?)
}

/// 64×64 Gaussian bump on `[−1, 1]²` and its grid spacing.
pub fn smooth_bump(n: usize) -> (GridFunction, f64) {
    let h = 2.0 / (n as f64 - 1.0);
    let f = GridFunction::from_fn(1, n, n, |_, y, x| {
        let (px, py) = (-1.0 + x as f64 * h, -1.0 + y as f64 * h);
        (-(px * px + py * py) / 0.2).exp()
    })
    .expect("nonempty");
    (f, h)
}

fn morphology_checks(rec: &mut Recorder, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
        let c = rng.random_range(1..3);
        let f = random_grid(rng, c, h, w);
        let spec = random_spec(rng, h.min(w).min(3))?;
        let geom = GridGeometry::for_grid(&f);
        let d = dilate(&f, &spec, &geom)?;
        let e = erode(&f.neg(), &spec, &geom)?.neg();
        mismatches += d
            .as_slice()
            .iter()
            .zip(e.as_slice())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
    }
    rec.check("dilation_erosion_duality_bitwise", mismatches as f64, 0.0);

    // Adjunction δ ⊣ ε: δ(f) ≤ g ⇔ f ≤ ε(g), plus δε ≤ id ≤ εδ.
    let (mut iff_violations, mut closing_violations, mut monotone_violations) = (0usize, 0usize, 0usize);
    const SLACK: f64 = 1e-12;
    for trial in 0..100 {
        let f = random_grid(rng, 1, 8, 8);
        let spec = random_spec(rng, 3)?;
        let geom = GridGeometry::for_grid(&f);
        let df = dilate(&f, &spec, &geom)?;
        let g = if trial % 2 == 0 {
            df.map(|v| v + 1e-3)
        } else {
            let (y, x) = (rng.random_range(0..8), rng.random_range(0..8));
            let mut g = df.map(|v| v + 1e-3);
            g.set(0, y, x, df.get(0, y, x) - 0.1);
            g
        };
        let lhs = dilate(&f, &spec, &geom)?.le(&g);
        let rhs = f.le(&erode(&g, &spec, &geom)?);
        if lhs != rhs {
            iff_violations += 1;
        }
        let opened = dilate(&erode(&f, &spec, &geom)?, &spec, &geom)?;
        let closed = erode(&df, &spec, &geom)?;
        for i in 0..f.as_slice().len() {
            let v = f.as_slice()[i];
            if opened.as_slice()[i] > v + SLACK || closed.as_slice()[i] < v - SLACK {
                closing_violations += 1;
            }
        }
        let lift: Vec<f64> = (0..f.as_slice().len()).map(|_| rng.random_range(0.0..0.5)).collect();
        let above = f.with_data(f.as_slice().iter().zip(&lift).map(|(v, d)| v + d).collect())?;
        if !erode(&f, &spec, &geom)?.le(&erode(&above, &spec, &geom)?)
            || !dilate(&f, &spec, &geom)?.le(&dilate(&above, &spec, &geom)?)
        {
            monotone_violations += 1;
        }
    }
    rec.check("adjunction_equivalence_violations", iff_violations as f64, 0.0);
    rec.check("opening_closing_order_violations", closing_violations as f64, 0.0);
    rec.check("monotonicity_violations", monotone_violations as f64, 0.0);

    // Physical coordinates on [0, 2π)², window wide enough for the
    // displacement at t = 1.
    let h = std::f64::consts::TAU / 32.0;
    let field = GridFunction::from_fn(1, 32, 32, |_, y, x| {
        let (u, v) = (x as f64 * h, y as f64 * h);
        u.sin() + 0.5 * (2.0 * v).cos() + 0.3 * (u + v).sin()
    })?;
    let geom = GridGeometry::for_grid(&field).with_pixel_scale(h);
    let half = StructuringSpec::euclidean(2.0, 0.5, Window::Periodic { radius: 12 })?;
    let full = half.with_t(1.0)?;
    let twice = erode(&erode(&field, &half, &geom)?, &half, &geom)?;
    let once = erode(&field, &full, &geom)?;
    rec.check("erosion_semigroup_relative_linf", twice.relative_linf(&once), 0.02);

    let (bump, h) = smooth_bump(64);
    let problem = MorphPdeProblem {
        initial: bump.clone(),
        k: 2.0,
        lp_norm: LpNorm::L2,
        sign: MorphSign::Erosion,
        horizon: 0.25,
        grid_spacing: h,
    };
    let hl = hopf_lax_solve(&problem)?;
    let fd = fd_hj_solve(&problem, 0.5)?;
    rec.check("hopf_lax_vs_finite_difference_linf", hl.max_abs_diff(&fd), 0.05);
    let spec = StructuringSpec::euclidean(2.0, 0.25, Window::Full)?;
    let scan = erode(&bump, &spec, &GridGeometry::for_grid(&bump).with_pixel_scale(h))?;
    rec.check("hopf_lax_vs_exhaustive_erosion_linf", hl.max_abs_diff(&scan), 1e-12);
    Ok(())
}

fn random_action(rng: &mut ChaCha8Rng, side: usize, channels: usize, rotations: bool) -> Result<GridAction> {
    let kind = rng.random_range(0..if rotations { 4 } else { 2 });
    Ok(match kind {
        0 => GridAction::shift(
            rng.random_range(-(side as i64)..side as i64),
            rng.random_range(-(side as i64)..side as i64),
        ),
        1 => {
            let mut perm: Vec<usize> = (0..channels).collect();
            perm.shuffle(rng);
            GridAction::channels(perm)?
        }
        2 => GridAction::quarter_turn(rng.random_range(1..4)),
        _ => GridAction::flip(rng.random_range(0..2)),
    })
}

fn act_batch(g: &GridAction, t: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = t.shape();
    let mut out = Vec::with_capacity(t.len());
    for b in 0..s[0] {
        let f = GridFunction::new(s[1], s[2], s[3], t.outer(b).to_vec())?;
        out.extend(left_regular_action(g, &f)?.into_vec());
    }
    Ok(Tensor::new(s.to_vec(), out)?)
}

fn randn_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    standard_normal(rng, shape)
}

fn rel_linf(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(1e-12)
}

fn cde_settings(distance: StructuringDistance) -> CdeSettings {
    CdeSettings {
        k: 2.0,
        radius: 2,
        distance,
        metric_scale: 0.7,
        convection_time: 1.0,
    }
}

/// Layer parameters moved off their initial values so no branch is idle.
fn perturbed_cde_params(layer: &CdeLayer, rng: &mut ChaCha8Rng, velocity: f64) -> ParamStore<f64> {
    let mut p = layer.init_params::<f64>(rng);
    for name in layer.param_names() {
        let id = p.id(name).expect("own name");
        let amp = if name.ends_with("velocity") { velocity } else { 0.3 };
        for v in p.get_mut(id).data_mut() {
            *v += amp * normal(rng);
        }
    }
    p
}

fn run_cde(layer: &CdeLayer, p: &ParamStore<f64>, x: &Tensor<f64>, bias: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars = p.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let bv = tape.constant(bias.clone());
    let y = layer.forward(&mut tape, &vars, xv, bv)?;
    Ok(tape.value(y).clone())
}

fn equivariance_checks(rec: &mut Recorder, rng: &mut ChaCha8Rng) -> Result<()> {
    const TOL: f64 = 1e-5;
    let (mut ero, mut dil, mut conv) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let side = rng.random_range(4..9);
        let f = random_grid(rng, 3, side, side);
        let spec = random_spec(rng, 3.min(side))?;
        let geom = GridGeometry::for_grid(&f);
        let g = random_action(rng, side, 3, true)?;
        let gf = left_regular_action(&g, &f)?;
        ero = ero.max(erode(&gf, &spec, &geom)?.relative_linf(&left_regular_action(&g, &erode(&f, &spec, &geom)?)?));
        dil = dil.max(dilate(&gf, &spec, &geom)?.relative_linf(&left_regular_action(&g, &dilate(&f, &spec, &geom)?)?));
        let cs = ConvectionSpec {
            velocity: (0..3)
                .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                .collect(),
            time: rng.random_range(0.1..1.5),
        };
        let shift = random_action(rng, side, 3, false)?;
        let shift = GridAction {
            channel_perm: None,
            ..shift
        };
        conv = conv.max(
            convect(&left_regular_action(&shift, &f)?, &cs)?
                .relative_linf(&left_regular_action(&shift, &convect(&f, &cs)?)?),
        );
    }
    rec.check("erosion_equivariance", ero, TOL);
    rec.check("dilation_equivariance", dil, TOL);
    rec.check("convection_translation_equivariance", conv, TOL);

    let mut block: f64 = 0.0;
    for i in 0..50 {
        let distance = if i % 2 == 0 {
            StructuringDistance::Hyperbolic
        } else {
            StructuringDistance::Euclidean
        };
        let layer = CdeLayer::new(4, 2, cde_settings(distance));
        let spatial_only = i % 3 != 0;
        let p = perturbed_cde_params(&layer, rng, if spatial_only { 0.0 } else { 1.5 });
        let side = 6;
        let x = randn_tensor(rng, &[2, 4, side, side]);
        let bias = randn_tensor(rng, &[2, 4]);
        let g = if spatial_only {
            GridAction {
                channel_perm: None,
                ..random_action(rng, side, 4, true)?
            }
        } else {
            GridAction::shift(rng.random_range(-6..6), rng.random_range(-6..6))
        };
        let lhs = run_cde(&layer, &p, &act_batch(&g, &x)?, &bias)?;
        let rhs = act_batch(&g, &run_cde(&layer, &p, &x, &bias)?)?;
        block = block.max(rel_linf(&lhs, &rhs));
    }
    rec.check("cde_block_equivariance", block, TOL);

    let model = GmcUnet::new(UNetConfig {
        image_side: 8,
        base_channels: 8,
        stages: 0,
        groups: 2,
        heads: 2,
        window_radius: 2,
        time_features: 8,
        ..UNetConfig::default()
    })?;
    let mut p = model.init_params::<f64>(rng);
    for name in model.param_names() {
        let id = p.id(name).expect("own name");
        for v in p.get_mut(id).data_mut() {
            *v += 0.2 * normal(rng);
        }
    }
    let mut net: f64 = 0.0;
    for _ in 0..50 {
        let x = randn_tensor(rng, &[1, 1, 8, 8]);
        let steps = [rng.random_range(1..200)];
        let g = GridAction::shift(rng.random_range(-8..8), rng.random_range(-8..8));
        let lhs = model.predict(&p, &act_batch(&g, &x)?, &steps)?;
        let rhs = act_batch(&g, &model.predict(&p, &x, &steps)?)?;
        net = net.max(rel_linf(&lhs, &rhs));
    }
    rec.check("flat_network_translation_equivariance", net, TOL);
    Ok(())
}

/// Worst per-input relative error between the tape gradient of a random
/// linear functional of `f` and central differences.
pub fn finite_difference_error(
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        randn_tensor(rng, tape.shape(out))
    };
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[i]);
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut vals = inputs.to_vec();
            vals[i].data_mut()[j] += step;
            let up = eval(&vals)?;
            vals[i].data_mut()[j] -= 2.0 * step;
            let down = eval(&vals)?;
            *slot = (up - down) / (2.0 * step);
        }
        let numeric = Tensor::new(input.shape().to_vec(), numeric)?;
        let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-8);
        worst = worst.max(analytic.max_abs_diff(&numeric) / scale);
    }
    Ok(worst)
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..1.5)).collect()).expect("shape")
}

fn gradient_checks(rec: &mut Recorder, rng: &mut ChaCha8Rng) -> Result<()> {
    const H: f64 = 1e-6;
    let mut elementwise: f64 = 0.0;
    let mut structured: f64 = 0.0;
    for _ in 0..3 {
        let x = randn_tensor(rng, &[2, 3, 5, 4]);
        elementwise = elementwise.max(finite_difference_error(
            std::slice::from_ref(&x),
            &|t, v| Ok(t.silu(v[0])),
            H,
            rng,
        )?);
        elementwise = elementwise.max(finite_difference_error(
            std::slice::from_ref(&x),
            &|t, v| Ok(t.softplus(v[0])),
            H,
            rng,
        )?);
        elementwise = elementwise.max(finite_difference_error(
            std::slice::from_ref(&x),
            &|t, v| Ok(t.square(v[0])),
            H,
            rng,
        )?);

        let w = randn_tensor(rng, &[4, 3, 3, 3]);
        let b = randn_tensor(rng, &[4]);
        let padding = if rng.random::<bool>() {
            Padding::Periodic
        } else {
            Padding::Zero
        };
        let stride = rng.random_range(1..3);
        structured = structured.max(finite_difference_error(
            &[x.clone(), w, b],
            &|t, v| Ok(t.conv2d(v[0], v[1], Some(v[2]), stride, padding)?),
            H,
            rng,
        )?);
        let gamma = randn_tensor(rng, &[3]);
        let beta = randn_tensor(rng, &[3]);
        structured = structured.max(finite_difference_error(
            &[x.clone(), gamma, beta],
            &|t, v| Ok(t.group_norm(v[0], v[1], v[2], 3)?),
            H,
            rng,
        )?);
        let a = randn_tensor(rng, &[3, 4]);
        let m = randn_tensor(rng, &[4, 5]);
        structured = structured.max(finite_difference_error(
            &[a.clone(), m],
            &|t, v| Ok(t.matmul(v[0], v[1])?),
            H,
            rng,
        )?);
        structured = structured.max(finite_difference_error(&[a], &|t, v| Ok(t.softmax(v[0])?), H, rng)?);

        let tt = positive_tensor(rng, &[3]);
        let sc = positive_tensor(rng, &[3]);
        let distance = if rng.random::<bool>() {
            StructuringDistance::Hyperbolic
        } else {
            StructuringDistance::Euclidean
        };
        let kind = if rng.random::<bool>() {
            WindowKind::Min
        } else {
            WindowKind::Max
        };
        let k = rng.random_range(1.5..3.0);
        structured = structured.max(finite_difference_error(
            &[x.clone(), tt, sc],
            &|t, v| {
                let pen = t.structuring_penalty(v[1], v[2], k, 2, distance)?;
                Ok(t.window(v[0], pen, 2, kind)?)
            },
            H,
            rng,
        )?);
        let vel = randn_tensor(rng, &[3, 2]);
        structured = structured.max(finite_difference_error(
            &[x, vel],
            &|t, v| Ok(t.shift(v[0], v[1], 0.7)?),
            H,
            rng,
        )?);
    }
    rec.check("elementwise_ops_gradient", elementwise, 1e-4);
    rec.check("structured_ops_gradient", structured, 1e-3);

    let mut block: f64 = 0.0;
    for i in 0..3 {
        let distance = if i % 2 == 0 {
            StructuringDistance::Hyperbolic
        } else {
            StructuringDistance::Euclidean
        };
        let layer = CdeLayer::new(3, 1, cde_settings(distance));
        let p = perturbed_cde_params(&layer, rng, 1.5);
        let x = randn_tensor(rng, &[1, 3, 5, 5]);
        let bias = randn_tensor(rng, &[1, 3]);
        let mut inputs = vec![x, bias];
        inputs.extend(p.tensors().iter().cloned());
        let layer_ref = &layer;
        block = block.max(finite_difference_error(
            &inputs,
            &|t, v| Ok(layer_ref.forward(t, &v[2..], v[0], v[1])?),
            H,
            rng,
        )?);
    }
    rec.check("cde_block_gradient", block, 1e-3);
    Ok(())
}

fn diffusion_checks(rec: &mut Recorder, rng: &mut ChaCha8Rng) -> Result<()> {
    let sched = DiffusionSchedule::standard(200)?;
    // Composing the one-step kernel t times reproduces the closed-form
    // marginal N(√ᾱ_t n₀, (1 − ᾱ_t) I).
    let n = 10_000;
    let t = 50;
    let n0 = Tensor::full(&[n], 0.7);
    let mut x = n0.clone();
    for s in 1..=t {
        let eps: Tensor<f64> = standard_normal(rng, &[n]);
        x = forward_step(&x, s, &eps, &sched)?;
    }
    let mean = x.data().iter().sum::<f64>() / n as f64;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let ab = sched.alpha_bar(t);
    let (mu, s2) = (ab.sqrt() * 0.7, 1.0 - ab);
    let mean_se = (s2 / n as f64).sqrt();
    let var_se = s2 * (2.0 / (n as f64 - 1.0)).sqrt();
    rec.check(
        "forward_marginal_mean_in_standard_errors",
        (mean - mu).abs() / mean_se,
        4.0,
    );
    rec.check(
        "forward_marginal_variance_in_standard_errors",
        (var - s2).abs() / var_se,
        4.0,
    );

    let n0 = randn_tensor(rng, &[4, 1, 3, 3]);
    let eps = randn_tensor(rng, &[4, 1, 3, 3]);
    let n1 = crate::diffusion::forward_sample(&n0, 1, &eps, &sched)?;
    let rec0 = posterior_mean(&n1, &eps, 1, &sched)?;
    rec.check("step_one_reconstruction_identity", rec0.max_abs_diff(&n0), 1e-6);

    let mu = randn_tensor(rng, &[2, 1, 3, 3]);
    let mut other = mu.clone();
    other.data_mut()[3] += 1e-3;
    let same = kl_term(&mu, &mu, sched.sigma2(10))?;
    let differs = kl_term(&mu, &other, sched.sigma2(10))?;
    rec.check("kl_zero_for_equal_means", same.abs(), 0.0);
    rec.check(
        "kl_positive_for_different_means",
        if differs > 0.0 { 0.0 } else { 1.0 },
        0.0,
    );

    let data_var = 0.25;
    let predictor = gaussian_optimal_predictor(&sched, data_var);
    let out = sample(&predictor, &sched, &[10_000, 1, 1, 1], rng, |_, _| {})?;
    let m = out.data().iter().sum::<f64>() / out.len() as f64;
    let v = out.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / (out.len() as f64 - 1.0);
    rec.check(
        "gaussian_sampler_relative_variance_error",
        (v - data_var).abs() / data_var,
        0.05,
    );
    Ok(())
}
