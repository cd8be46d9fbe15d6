//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Every measured quantity is compared with an oracle written
//! here, independently of the library code under test.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::{act, generic_params, permute_params, randn, rel_linf, rng, run_layer, settings};
use morphflow::autodiff::{Padding, StructuringDistance, Tape, Tensor, Var, WindowKind};
use morphflow::data_io::load_checkpoint;
use morphflow::diffusion::{
    forward_sample, forward_step, gaussian_optimal_predictor, kl_term, posterior_mean, sample, standard_normal,
    DiffusionSchedule,
};
use morphflow::geometry::{
    ball_distance, embed, embed_jacobian, left_regular_action, unembed, GridAction, GridGeometry, HyperbolicPoint,
};
use morphflow::gmcunet::{BlockKind, CdeLayer, GmcUnet, UNetConfig};
use morphflow::morphpde::{
    convect, dilate, erode, fd_hj_solve, hopf_lax_solve, ConvectionSpec, DistanceMode, LpNorm, MorphPdeProblem,
    MorphSign, StructuringSpec, Window,
};
use morphflow::pipeline::{read_metrics, sample_checkpoint, RunConfig, Trainer, CHECKPOINT_FILE, METRICS_FILE};
use morphflow::GridFunction;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// One measured quantity against its bound.
struct Measure {
    what: String,
    value: f64,
    bound: f64,
}

impl Measure {
    fn at_most(what: &str, value: f64, bound: f64) -> Self {
        Self {
            what: what.to_string(),
            value,
            bound,
        }
    }

    fn ok(&self) -> bool {
        self.value <= self.bound
    }
}

fn report(id: usize, title: &str, measures: &[Measure], elapsed: Duration) -> bool {
    let ok = measures.iter().all(Measure::ok);
    let detail: Vec<String> = measures
        .iter()
        .map(|m| {
            format!(
                "{} {:.3e} (<= {:.1e}{})",
                m.what,
                m.value,
                m.bound,
                if m.ok() { "" } else { " VIOLATED" }
            )
        })
        .collect();
    println!(
        "criterion {id:>2} {title}: {} [{:.1}s] {}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        detail.join("; ")
    );
    ok
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn ball_point(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| normal(r));
    v.normalize() * (0.95 * r.random::<f64>().powf(1.0 / n as f64))
}

/// Random element of O(n) composed with a signed coordinate permutation.
fn random_isometry(r: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let q = DMatrix::from_fn(n, n, |_, _| normal(r)).qr().q();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(r);
    let signs: Vec<f64> = (0..n).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
    DMatrix::from_fn(n, n, |i, j| if perm[i] == j { signs[i] } else { 0.0 }) * q
}

/// Poincaré-ball distance written out from its definition.
fn ball_distance_oracle(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let num = 2.0 * (x - y).norm_squared();
    let den = (1.0 - x.norm_squared()) * (1.0 - y.norm_squared());
    (1.0 + num / den).acosh()
}

fn criterion_1() -> Vec<Measure> {
    let mut r = rng(101);
    let (mut invariance, mut oracle) = (0.0f64, 0.0f64);
    for n in [2, 3] {
        for _ in 0..1000 {
            let (x, y) = (ball_point(&mut r, n), ball_point(&mut r, n));
            let q = random_isometry(&mut r, n);
            let d = ball_distance(x.as_slice(), y.as_slice());
            let dq = ball_distance((&q * &x).as_slice(), (&q * &y).as_slice());
            invariance = invariance.max((dq - d).abs());
            oracle = oracle.max((d - ball_distance_oracle(&x, &y)).abs() / d.max(1.0));
        }
    }
    vec![
        Measure::at_most("max |d(Rx,Ry) - d(x,y)|", invariance, 1e-12),
        Measure::at_most("distance vs closed form", oracle, 1e-12),
    ]
}

fn criterion_2() -> Vec<Measure> {
    let mut r = rng(102);
    let (mut there_back, mut back_there, mut jac, mut det_gap, mut zero_dets) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0);
    for i in 0..1000 {
        let n = 2 + i % 2;
        let x = DVector::from_fn(n, |_, _| 2.0 * normal(&mut r));
        let phi = |v: &DVector<f64>| v / (1.0 + v.norm_squared()).sqrt();
        there_back = there_back.max((unembed(&embed(&x)).unwrap() - &x).amax());
        there_back = there_back.max((embed(&x).coords() - phi(&x)).amax());

        let p = ball_point(&mut r, n);
        let s = unembed(&HyperbolicPoint::new(p.clone()).unwrap()).unwrap();
        back_there = back_there.max((embed(&s).coords() - &p).amax());

        let j = embed_jacobian(&x);
        let h = 1e-6;
        let fd = DMatrix::from_fn(n, n, |row, col| {
            let mut up = x.clone();
            let mut down = x.clone();
            up[col] += h;
            down[col] -= h;
            (phi(&up)[row] - phi(&down)[row]) / (2.0 * h)
        });
        jac = jac.max((&j - &fd).amax() / j.amax());
        let det = j.determinant();
        let closed = (1.0 + x.norm_squared()).powf(-(n as f64 / 2.0 + 1.0));
        det_gap = det_gap.max((det - closed).abs() / closed);
        if det == 0.0 || !det.is_finite() {
            zero_dets += 1.0;
        }
    }
    vec![
        Measure::at_most("S(Phi(x)) - x", there_back, 1e-12),
        Measure::at_most("Phi(S(p)) - p", back_there, 1e-12),
        Measure::at_most("jacobian vs finite differences", jac, 1e-6),
        Measure::at_most("determinant vs closed form", det_gap, 1e-10),
        Measure::at_most("zero determinants", zero_dets, 0.0),
    ]
}

fn random_grid(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> GridFunction {
    let data = (0..c * h * w).map(|_| r.random_range(-2.0..2.0)).collect();
    GridFunction::new(c, h, w, data).unwrap()
}

fn random_spec(r: &mut ChaCha8Rng, max_radius: usize) -> StructuringSpec {
    let mode = if r.random::<bool>() {
        DistanceMode::Euclidean
    } else {
        DistanceMode::HyperbolicEmbedded
    };
    let k = r.random_range(1.2..3.0);
    let t = r.random_range(0.2..2.0);
    let radius = r.random_range(1..=max_radius);
    StructuringSpec::new(k, t, Window::Periodic { radius }, mode, r.random_range(0.3..1.5)).unwrap()
}

/// Periodic windowed erosion or dilation with the structuring function
/// evaluated from scratch.
fn morph_oracle(f: &GridFunction, spec: &StructuringSpec, dilation: bool) -> GridFunction {
    let Window::Periodic { radius } = spec.window() else {
        panic!("oracle covers periodic windows only");
    };
    let k = spec.k();
    let ck = (k - 1.0) / k.powf(k / (k - 1.0));
    let s = spec.metric_scale();
    let r = radius as isize;
    let (c, h, w) = f.shape();
    GridFunction::from_fn(c, h, w, |ch, y, x| {
        let mut best = if dilation { f64::NEG_INFINITY } else { f64::INFINITY };
        for dy in -r..=r {
            for dx in -r..=r {
                let rho = s * ((dx * dx + dy * dy) as f64).sqrt();
                let dist = match spec.distance_mode() {
                    DistanceMode::Euclidean => rho,
                    DistanceMode::HyperbolicEmbedded => (1.0 + 2.0 * rho * rho).acosh(),
                };
                let b = if dist == 0.0 {
                    0.0
                } else {
                    ck * dist.powf(k / (k - 1.0)) / spec.t().powf(1.0 / (k - 1.0))
                };
                let yy = (y as isize + dy).rem_euclid(h as isize) as usize;
                let xx = (x as isize + dx).rem_euclid(w as isize) as usize;
                let v = f.get(ch, yy, xx);
                best = if dilation { best.max(v - b) } else { best.min(v + b) };
            }
        }
        best
    })
    .unwrap()
}

fn criterion_3() -> Vec<Measure> {
    let mut r = rng(103);
    let (mut mismatches, mut oracle) = (0.0, 0.0f64);
    for _ in 0..100 {
        let (h, w) = (r.random_range(3..10), r.random_range(3..10));
        let c = r.random_range(1..4);
        let f = random_grid(&mut r, c, h, w);
        let spec = random_spec(&mut r, h.min(w).min(4));
        let geom = GridGeometry::for_grid(&f);
        let d = dilate(&f, &spec, &geom).unwrap();
        let e = erode(&f.neg(), &spec, &geom).unwrap().neg();
        mismatches += d
            .as_slice()
            .iter()
            .zip(e.as_slice())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count() as f64;
        oracle = oracle.max(d.max_abs_diff(&morph_oracle(&f, &spec, true)));
    }
    vec![
        Measure::at_most("bitwise mismatches", mismatches, 0.0),
        Measure::at_most("dilation vs oracle", oracle, 1e-12),
    ]
}

fn criterion_4() -> Vec<Measure> {
    let mut r = rng(104);
    // Rounding in `f + b − b` may leave the closing a few ulps below `f`.
    const ROUNDING: f64 = 1e-12;
    let (mut adjunction, mut ordering, mut monotone, mut oracle) = (0.0, 0.0, 0.0, 0.0f64);
    for _ in 0..100 {
        let f = random_grid(&mut r, 1, 8, 8);
        let spec = random_spec(&mut r, 3);
        let geom = GridGeometry::for_grid(&f);
        let df = dilate(&f, &spec, &geom).unwrap();
        let ef = erode(&f, &spec, &geom).unwrap();
        oracle = oracle.max(ef.max_abs_diff(&morph_oracle(&f, &spec, false)));

        // δf ≤ g ⇔ f ≤ εg, for a g just above δf and for one pixel pushed
        // below it at every position in turn.
        let above = df.map(|v| v + 1e-3);
        let mut candidates = vec![above.clone()];
        for i in 0..64 {
            let mut g = above.clone();
            g.as_mut_slice()[i] = df.as_slice()[i] - 0.05;
            candidates.push(g);
        }
        for g in &candidates {
            let lhs = df.le(g);
            let rhs = f.le(&erode(g, &spec, &geom).unwrap());
            if lhs != rhs {
                adjunction += 1.0;
            }
        }

        let opened = dilate(&ef, &spec, &geom).unwrap();
        let closed = erode(&df, &spec, &geom).unwrap();
        for i in 0..64 {
            let v = f.as_slice()[i];
            if opened.as_slice()[i] > v + ROUNDING || closed.as_slice()[i] < v - ROUNDING {
                ordering += 1.0;
            }
        }

        let lifted = f
            .with_data(f.as_slice().iter().map(|v| v + r.random_range(0.0..0.5)).collect())
            .unwrap();
        let eu = erode(&lifted, &spec, &geom).unwrap();
        let du = dilate(&lifted, &spec, &geom).unwrap();
        for i in 0..64 {
            if ef.as_slice()[i] > eu.as_slice()[i] || df.as_slice()[i] > du.as_slice()[i] {
                monotone += 1.0;
            }
        }
    }
    vec![
        Measure::at_most("adjunction violations", adjunction, 0.0),
        Measure::at_most("opening/closing order violations", ordering, 0.0),
        Measure::at_most("monotonicity violations", monotone, 0.0),
        Measure::at_most("erosion vs oracle", oracle, 1e-12),
    ]
}

fn criterion_5() -> Vec<Measure> {
    use std::f64::consts::TAU;
    let fields: [fn(f64, f64) -> f64; 3] = [
        |u, v| u.sin() + 0.5 * (2.0 * v).cos() + 0.3 * (u + v).sin(),
        |u, v| (u.cos() * v.sin()).exp(),
        |u, v| 0.8 * (u - 2.0 * v).sin() + 0.2 * (3.0 * u).cos(),
    ];
    // Fields live on [0, 2π)² so the optimal displacement spans several
    // pixels; the window covers it.
    let h = TAU / 32.0;
    let half = StructuringSpec::euclidean(2.0, 0.5, Window::Periodic { radius: 12 }).unwrap();
    let full = half.with_t(1.0).unwrap();
    let mut worst: f64 = 0.0;
    for field in fields {
        let f = GridFunction::from_fn(1, 32, 32, |_, y, x| field(x as f64 * h, y as f64 * h)).unwrap();
        let geom = GridGeometry::for_grid(&f).with_pixel_scale(h);
        let twice = erode(&erode(&f, &half, &geom).unwrap(), &half, &geom).unwrap();
        let once = erode(&f, &full, &geom).unwrap();
        worst = worst.max(twice.max_abs_diff(&once) / once.linf_norm());
    }
    vec![Measure::at_most("relative L-inf", worst, 0.02)]
}

fn criterion_6() -> Vec<Measure> {
    let n = 64;
    let h = 2.0 / (n as f64 - 1.0);
    let bump = GridFunction::from_fn(1, n, n, |_, y, x| {
        let (px, py) = (-1.0 + x as f64 * h, -1.0 + y as f64 * h);
        (-(px * px + py * py) / 0.2).exp()
    })
    .unwrap();
    let t = 0.25;
    let problem = MorphPdeProblem {
        initial: bump.clone(),
        k: 2.0,
        lp_norm: LpNorm::L2,
        sign: MorphSign::Erosion,
        horizon: t,
        grid_spacing: h,
    };
    let start = Instant::now();
    let hl = hopf_lax_solve(&problem).unwrap();
    let fd = fd_hj_solve(&problem, 0.5).unwrap();
    let solve_time = start.elapsed().as_secs_f64();

    // For H(p) = |p|², u(x) = min_y f(y) + |x − y|² / (4t).
    let direct = GridFunction::from_fn(1, n, n, |_, y, x| {
        let mut best = f64::INFINITY;
        for yy in 0..n {
            for xx in 0..n {
                let d2 = (((x as f64 - xx as f64) * h).powi(2)) + (((y as f64 - yy as f64) * h).powi(2));
                best = best.min(bump.get(0, yy, xx) + d2 / (4.0 * t));
            }
        }
        best
    })
    .unwrap();
    let spec = StructuringSpec::euclidean(2.0, t, Window::Full).unwrap();
    let scan = erode(&bump, &spec, &GridGeometry::for_grid(&bump).with_pixel_scale(h)).unwrap();
    vec![
        Measure::at_most("hopf-lax vs finite differences", hl.max_abs_diff(&fd), 0.05),
        Measure::at_most("hopf-lax vs exhaustive erosion", hl.max_abs_diff(&scan), 1e-12),
        Measure::at_most("hopf-lax vs direct minimisation", hl.max_abs_diff(&direct), 1e-12),
        Measure::at_most("solver seconds", solve_time, 10.0),
    ]
}

fn random_action(r: &mut ChaCha8Rng, side: usize, channels: usize, kinds: usize) -> GridAction {
    let s = side as i64;
    match r.random_range(0..kinds) {
        0 => GridAction::shift(r.random_range(-s..s), r.random_range(-s..s)),
        1 => GridAction::quarter_turn(r.random_range(1..4)),
        2 => GridAction::flip(r.random_range(0..2)),
        _ => {
            let mut perm: Vec<usize> = (0..channels).collect();
            perm.shuffle(r);
            GridAction::channels(perm).unwrap()
        }
    }
}

fn criterion_7() -> Vec<Measure> {
    const TOL: f64 = 1e-5;
    let mut r = rng(107);
    let (mut ero, mut dil, mut conv) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let side = r.random_range(4..10);
        let f = random_grid(&mut r, 3, side, side);
        let spec = random_spec(&mut r, 3.min(side));
        let geom = GridGeometry::for_grid(&f);
        let g = random_action(&mut r, side, 3, 4);
        let gf = left_regular_action(&g, &f).unwrap();
        let e1 = erode(&gf, &spec, &geom).unwrap();
        let e2 = left_regular_action(&g, &erode(&f, &spec, &geom).unwrap()).unwrap();
        ero = ero.max(e1.relative_linf(&e2));
        let d1 = dilate(&gf, &spec, &geom).unwrap();
        let d2 = left_regular_action(&g, &dilate(&f, &spec, &geom).unwrap()).unwrap();
        dil = dil.max(d1.relative_linf(&d2));

        let cs = ConvectionSpec {
            velocity: (0..3)
                .map(|_| [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)])
                .collect(),
            time: r.random_range(0.1..1.5),
        };
        let shift = random_action(&mut r, side, 3, 1);
        let c1 = convect(&left_regular_action(&shift, &f).unwrap(), &cs).unwrap();
        let c2 = left_regular_action(&shift, &convect(&f, &cs).unwrap()).unwrap();
        conv = conv.max(c1.relative_linf(&c2));
    }

    // CDE block: translations with moving velocities, rotations and flips
    // at zero velocity, channel permutations with parameters permuted
    // alongside (one channel per group).
    let mut block: f64 = 0.0;
    for i in 0..50 {
        let distance = if i % 2 == 0 {
            StructuringDistance::Hyperbolic
        } else {
            StructuringDistance::Euclidean
        };
        let c = 4;
        let side = 6;
        let x = randn(&mut r, &[2, c, side, side]);
        let bias = randn(&mut r, &[2, c]);
        let err = match i % 3 {
            0 => {
                let layer = CdeLayer::new(c, 2, settings(distance));
                let p = generic_params(&layer, 1000 + i as u64, false);
                let g = random_action(&mut r, side, c, 1);
                rel_linf(
                    &run_layer(&layer, &p, &act(&g, &x), &bias),
                    &act(&g, &run_layer(&layer, &p, &x, &bias)),
                )
            }
            1 => {
                let layer = CdeLayer::new(c, 2, settings(distance));
                let p = generic_params(&layer, 1000 + i as u64, true);
                let g = random_action(&mut r, side, c, 3);
                rel_linf(
                    &run_layer(&layer, &p, &act(&g, &x), &bias),
                    &act(&g, &run_layer(&layer, &p, &x, &bias)),
                )
            }
            _ => {
                let layer = CdeLayer::new(c, c, settings(distance));
                let p = generic_params(&layer, 1000 + i as u64, false);
                let mut perm: Vec<usize> = (0..c).collect();
                perm.shuffle(&mut r);
                let g = GridAction::channels(perm.clone()).unwrap();
                let mut bias_p = bias.clone();
                for b in 0..2 {
                    for ch in 0..c {
                        bias_p.data_mut()[b * c + perm[ch]] = bias.data()[b * c + ch];
                    }
                }
                let lhs = run_layer(&layer, &permute_params(&p, &perm), &act(&g, &x), &bias_p);
                rel_linf(&lhs, &act(&g, &run_layer(&layer, &p, &x, &bias)))
            }
        };
        block = block.max(err);
    }

    let model = GmcUnet::new(UNetConfig {
        image_side: 8,
        base_channels: 8,
        stages: 0,
        groups: 2,
        heads: 2,
        window_radius: 2,
        time_features: 8,
        ..UNetConfig::default()
    })
    .unwrap();
    let mut p = model.init_params::<f64>(&mut r);
    for name in model.param_names() {
        let id = p.id(name).unwrap();
        for v in p.get_mut(id).data_mut() {
            *v += 0.2 * normal(&mut r);
        }
    }
    let mut net: f64 = 0.0;
    for _ in 0..50 {
        let x = randn(&mut r, &[1, 1, 8, 8]);
        let steps = [r.random_range(1..200)];
        let g = random_action(&mut r, 8, 1, 1);
        let lhs = model.predict(&p, &act(&g, &x), &steps).unwrap();
        let rhs = act(&g, &model.predict(&p, &x, &steps).unwrap());
        net = net.max(rel_linf(&lhs, &rhs));
    }
    vec![
        Measure::at_most("erode", ero, TOL),
        Measure::at_most("dilate", dil, TOL),
        Measure::at_most("convect", conv, TOL),
        Measure::at_most("cde block", block, TOL),
        Measure::at_most("flat network", net, TOL),
    ]
}

fn positive(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    common::uniform(r, shape, 0.5, 1.5)
}

type Graph<'a> = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a>;

fn criterion_8() -> Vec<Measure> {
    const H: f64 = 1e-6;
    let (mut elementwise, mut structured, mut block) = (0.0f64, 0.0f64, 0.0f64);
    let mut r = rng(108);
    for config in 0..20u64 {
        let seed = 5000 + 100 * config;
        let (b, c, h, w) = (
            r.random_range(1..3),
            r.random_range(2..4),
            r.random_range(3..6),
            r.random_range(3..6),
        );
        let x = randn(&mut r, &[b, c, h, w]);
        let y = randn(&mut r, &[b, c, h, w]);
        let scalar = normal(&mut r);
        let elementwise_cases: Vec<(Vec<Tensor<f64>>, Graph)> = vec![
            (vec![x.clone(), y.clone()], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
            (vec![x.clone(), y.clone()], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
            (vec![x.clone(), y.clone()], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
            (vec![x.clone()], Box::new(move |t, v| t.scale(v[0], scalar))),
            (vec![x.clone()], Box::new(move |t, v| t.add_scalar(v[0], scalar))),
            (vec![x.clone()], Box::new(|t, v| t.square(v[0]))),
            (vec![x.clone()], Box::new(|t, v| t.silu(v[0]))),
            (vec![x.clone()], Box::new(|t, v| t.softplus(v[0]))),
            (vec![x.clone()], Box::new(|t, v| t.sum(v[0]))),
            (vec![x.clone()], Box::new(|t, v| t.mean(v[0]))),
            (vec![x.clone(), y.clone()], Box::new(|t, v| t.mse(v[0], v[1]).unwrap())),
        ];
        for (i, (inputs, f)) in elementwise_cases.iter().enumerate() {
            elementwise = elementwise.max(common::grad_check(inputs, f, H, seed + i as u64));
        }

        let (m, k, n) = (r.random_range(2..5), r.random_range(2..5), r.random_range(2..5));
        let a = randn(&mut r, &[m, k]);
        let bt = randn(&mut r, &[n, k]);
        let a3 = randn(&mut r, &[2, k, m]);
        let b3 = randn(&mut r, &[2, k, n]);
        let wl = randn(&mut r, &[n, k]);
        let bl = randn(&mut r, &[n]);
        let chan = randn(&mut r, &[c]);
        let chan_b = randn(&mut r, &[b, c]);
        let conv_k = if r.random::<bool>() { 3 } else { 1 };
        let wc = randn(&mut r, &[c + 1, c, conv_k, conv_k]);
        let bc = randn(&mut r, &[c + 1]);
        let stride = r.random_range(1..3);
        let padding = if r.random::<bool>() {
            Padding::Periodic
        } else {
            Padding::Zero
        };
        let gamma = randn(&mut r, &[c]);
        let beta = randn(&mut r, &[c]);
        let groups = if c % 2 == 0 && r.random::<bool>() { 2 } else { 1 };
        let tt = positive(&mut r, &[c]);
        let sc = positive(&mut r, &[c]);
        let distance = if r.random::<bool>() {
            StructuringDistance::Hyperbolic
        } else {
            StructuringDistance::Euclidean
        };
        let kind = if r.random::<bool>() {
            WindowKind::Min
        } else {
            WindowKind::Max
        };
        let kk = r.random_range(1.5..3.0);
        let radius = r.random_range(1..=2.min(h.min(w)));
        let vel = randn(&mut r, &[c, 2]);
        let shift_time = r.random_range(0.2..1.2);
        let structured_cases: Vec<(Vec<Tensor<f64>>, Graph)> = vec![
            (
                vec![x.clone()],
                Box::new(move |t, v| t.reshape(v[0], &[b * c, h * w]).unwrap()),
            ),
            (
                vec![a.clone(), bt.clone()],
                Box::new(|t, v| t.matmul_t(v[0], v[1], false, true).unwrap()),
            ),
            (
                vec![a3, b3],
                Box::new(|t, v| t.matmul_t(v[0], v[1], true, false).unwrap()),
            ),
            (
                vec![a.clone(), wl, bl],
                Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
            ),
            (
                vec![x.clone(), chan.clone()],
                Box::new(|t, v| t.add_channel(v[0], v[1]).unwrap()),
            ),
            (
                vec![x.clone(), chan_b],
                Box::new(|t, v| t.add_channel(v[0], v[1]).unwrap()),
            ),
            (
                vec![x.clone(), chan],
                Box::new(|t, v| t.mul_channel(v[0], v[1]).unwrap()),
            ),
            (
                vec![x.clone(), y.clone()],
                Box::new(|t, v| t.concat_channels(&[v[0], v[1]]).unwrap()),
            ),
            (
                vec![x.clone()],
                Box::new(move |t, v| t.slice_channels(v[0], 1, c - 1).unwrap()),
            ),
            (vec![a.clone()], Box::new(|t, v| t.softmax(v[0]).unwrap())),
            (vec![x.clone()], Box::new(|t, v| t.upsample_nearest(v[0]).unwrap())),
            (
                vec![x.clone(), wc, bc],
                Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding).unwrap()),
            ),
            (
                vec![x.clone(), gamma, beta],
                Box::new(move |t, v| t.group_norm(v[0], v[1], v[2], groups).unwrap()),
            ),
            (
                vec![x.clone(), tt, sc],
                Box::new(move |t, v| {
                    let pen = t.structuring_penalty(v[1], v[2], kk, radius, distance).unwrap();
                    t.window(v[0], pen, radius, kind).unwrap()
                }),
            ),
            (
                vec![x.clone(), vel],
                Box::new(move |t, v| t.shift(v[0], v[1], shift_time).unwrap()),
            ),
        ];
        for (i, (inputs, f)) in structured_cases.iter().enumerate() {
            structured = structured.max(common::grad_check(inputs, f, H, seed + 50 + i as u64));
        }

        let distance = if config % 2 == 0 {
            StructuringDistance::Hyperbolic
        } else {
            StructuringDistance::Euclidean
        };
        let layer = CdeLayer::new(3, 1, settings(distance));
        let p = generic_params(&layer, seed + 99, false);
        let mut inputs: Vec<Tensor<f64>> = p.tensors().to_vec();
        let np = inputs.len();
        inputs.push(randn(&mut r, &[1, 3, 5, 5]));
        inputs.push(randn(&mut r, &[1, 3]));
        block = block.max(common::grad_check(
            &inputs,
            |t, v| layer.forward(t, &v[..np], v[np], v[np + 1]).unwrap(),
            H,
            seed + 98,
        ));
    }
    vec![
        Measure::at_most("elementwise ops", elementwise, 1e-4),
        Measure::at_most("structured ops", structured, 1e-3),
        Measure::at_most("cde block end to end", block, 1e-3),
    ]
}

fn criterion_9() -> Vec<Measure> {
    let mut r = rng(109);
    let steps = 200;
    let sched = DiffusionSchedule::standard(steps).unwrap();
    let betas: Vec<f64> = (0..steps)
        .map(|i| 1e-4 + i as f64 * (0.02 - 1e-4) / (steps as f64 - 1.0))
        .collect();
    let schedule_gap = sched
        .betas()
        .iter()
        .zip(&betas)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    // Composed one-step kernels against the closed-form marginal.
    let n = 10_000;
    let t = 60;
    let start = 0.7;
    let mut x = Tensor::full(&[n], start);
    for s in 1..=t {
        let eps: Tensor<f64> = standard_normal(&mut r, &[n]);
        x = forward_step(&x, s, &eps, &sched).unwrap();
    }
    let alpha_bar: f64 = betas[..t].iter().map(|b| 1.0 - b).product();
    let (mu, var) = (alpha_bar.sqrt() * start, 1.0 - alpha_bar);
    let mean = x.data().iter().sum::<f64>() / n as f64;
    let sample_var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let mean_z = (mean - mu).abs() / (var / n as f64).sqrt();
    let var_z = (sample_var - var).abs() / (var * (2.0 / (n as f64 - 1.0)).sqrt());

    let n0 = randn(&mut r, &[8, 1, 4, 4]);
    let eps = randn(&mut r, &[8, 1, 4, 4]);
    let n1 = forward_sample(&n0, 1, &eps, &sched).unwrap();
    let recon = posterior_mean(&n1, &eps, 1, &sched).unwrap().max_abs_diff(&n0);

    let (mut kl_equal, mut kl_wrong_sign, mut kl_formula) = (0.0f64, 0.0, 0.0f64);
    for trial in 0..100 {
        let a = randn(&mut r, &[2, 1, 3, 3]);
        let mut b = a.clone();
        let i = r.random_range(0..b.len());
        b.data_mut()[i] += if trial % 2 == 0 { 1e-3 } else { normal(&mut r) };
        let s2 = sched.sigma2(r.random_range(2..=steps));
        kl_equal = kl_equal.max(kl_term(&a, &a, s2).unwrap().abs());
        let kl = kl_term(&a, &b, s2).unwrap();
        if !(kl > 0.0) {
            kl_wrong_sign += 1.0;
        }
        let expect = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / (2.0 * s2);
        kl_formula = kl_formula.max((kl - expect).abs() / expect);
    }

    let data_var = 0.25;
    let predictor = gaussian_optimal_predictor(&sched, data_var);
    let out = sample(&predictor, &sched, &[10_000, 1, 1, 1], &mut r, |_, _| {}).unwrap();
    let m = out.data().iter().sum::<f64>() / out.len() as f64;
    let v = out.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / (out.len() as f64 - 1.0);

    vec![
        Measure::at_most("schedule vs linear betas", schedule_gap, 1e-15),
        Measure::at_most("marginal mean (standard errors)", mean_z, 4.0),
        Measure::at_most("marginal variance (standard errors)", var_z, 4.0),
        Measure::at_most("t=1 reconstruction", recon, 1e-6),
        Measure::at_most("kl for equal means", kl_equal, 0.0),
        Measure::at_most("non-positive kl for different means", kl_wrong_sign, 0.0),
        Measure::at_most("kl vs closed form", kl_formula, 1e-12),
        Measure::at_most("sampler relative variance error", (v - data_var).abs() / data_var, 0.05),
    ]
}

fn trend_config(block: &str, dir: &Path) -> RunConfig {
    RunConfig::from_toml(&format!(
        r#"
seed = 7
[dataset]
source = "synthetic_shapes"
count = 1000
held_out = 256
side = 16
[model]
image_side = 16
base_channels = 8
stages = 2
window_radius = 2
block = "{block}"
[diffusion]
steps = 200
[optimizer]
batch_size = 32
iterations = 2000
[output]
dir = "{}"
eval_every = 100
mmd_every = 500
mmd_samples = 256
sample_every = 1000
"#,
        dir.display()
    ))
    .unwrap()
}

fn criterion_10() -> Vec<Measure> {
    let mut out = Vec::new();
    for block in ["cde", "resnet"] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = trend_config(block, dir.path());
        assert_eq!(
            cfg.model.block,
            if block == "cde" {
                BlockKind::Cde
            } else {
                BlockKind::Resnet
            }
        );
        let start = Instant::now();
        let mut trainer = Trainer::new(cfg).unwrap();
        trainer.run().unwrap();
        let minutes = start.elapsed().as_secs_f64() / 60.0;
        let rows = trainer.metrics();
        let eval_at = |s: usize| rows.iter().find(|r| r.step == s).and_then(|r| r.eval_mse).unwrap();
        let mmd: Vec<f64> = rows.iter().filter_map(|r| r.mmd).collect();
        let (first, last) = (mmd[0], *mmd.last().unwrap());
        println!(
            "  {block}: eval_mse {:.4} -> {:.4}, mmd {first:.4} -> {last:.4} over {} evaluations, {minutes:.1} min",
            eval_at(100),
            eval_at(2000),
            mmd.len()
        );
        out.push(Measure::at_most(
            &format!("{block} eval_mse(2000)/eval_mse(100)"),
            eval_at(2000) / eval_at(100),
            0.7,
        ));
        out.push(Measure::at_most(
            &format!("{block} mmd(last)/mmd(first)"),
            last / first,
            0.7,
        ));
        out.push(Measure::at_most(&format!("{block} minutes"), minutes, 30.0));
    }
    out
}

fn small_run(dir: &Path, iterations: usize) -> RunConfig {
    let mut cfg = RunConfig::from_toml(&format!(
        r#"
seed = 11
[dataset]
count = 64
held_out = 16
side = 8
[model]
image_side = 8
base_channels = 8
stages = 1
window_radius = 2
groups = 2
heads = 2
time_features = 8
[diffusion]
steps = 40
[optimizer]
batch_size = 8
lr = 1e-3
ema_interval = 2
[output]
dir = "{}"
eval_every = 5
eval_batch = 16
mmd_every = 10
mmd_samples = 8
sample_every = 10
grid_size = 4
grid_cols = 2
checkpoint_every = 10
"#,
        dir.display()
    ))
    .unwrap();
    cfg.optimizer.iterations = iterations;
    cfg
}

fn criterion_11() -> Vec<Measure> {
    let artifacts = [
        CHECKPOINT_FILE,
        METRICS_FILE,
        "config.echo",
        "samples_000010.pgm",
        "samples_000020.pgm",
    ];
    let dir = tempfile::tempdir().unwrap();
    let run = |iterations: usize| {
        let mut t = Trainer::new(small_run(dir.path(), iterations)).unwrap();
        t.run().unwrap();
    };
    run(20);
    let first: Vec<Vec<u8>> = artifacts
        .iter()
        .map(|a| std::fs::read(dir.path().join(a)).unwrap())
        .collect();
    for a in artifacts {
        std::fs::remove_file(dir.path().join(a)).unwrap();
    }
    run(20);
    let differing = artifacts
        .iter()
        .zip(&first)
        .filter(|(a, bytes)| std::fs::read(dir.path().join(a)).unwrap() != **bytes)
        .count();
    let ck = dir.path().join(CHECKPOINT_FILE);
    let draw = || sample_checkpoint(&ck, 4, Some(10), Some(3), false).unwrap().1.images;
    let sample_mismatch = if draw() == draw() { 0.0 } else { 1.0 };

    let split = tempfile::tempdir().unwrap();
    let mut leg = Trainer::new(small_run(split.path(), 10)).unwrap();
    leg.run().unwrap();
    let mut resumed = Trainer::resume(&split.path().join(CHECKPOINT_FILE), Some(small_run(split.path(), 20))).unwrap();
    resumed.run().unwrap();
    let a = load_checkpoint(&ck).unwrap();
    let b = load_checkpoint(&split.path().join(CHECKPOINT_FILE)).unwrap();
    let mut differing_bits = 0usize;
    for (x, y) in a.arrays.iter().zip(&b.arrays) {
        assert_eq!(x.name, y.name);
        differing_bits += x
            .data
            .iter()
            .zip(&y.data)
            .filter(|(p, q)| p.to_bits() != q.to_bits())
            .count();
    }
    let metrics_differ = read_metrics(&dir.path().join(METRICS_FILE)).unwrap()
        != read_metrics(&split.path().join(METRICS_FILE)).unwrap();
    vec![
        Measure::at_most("artifacts differing between identical runs", differing as f64, 0.0),
        Measure::at_most("sample batches differing for one seed", sample_mismatch, 0.0),
        Measure::at_most("resumed weights differing bitwise", differing_bits as f64, 0.0),
        Measure::at_most("resumed metrics differing", if metrics_differ { 1.0 } else { 0.0 }, 0.0),
        Measure::at_most(
            "array count difference",
            a.arrays.len().abs_diff(b.arrays.len()) as f64,
            0.0,
        ),
    ]
}

fn main() {
    let criteria: [(&str, fn() -> Vec<Measure>); 11] = [
        ("isometry invariance", criterion_1),
        ("embedding round trips and jacobian", criterion_2),
        ("dilation/erosion duality", criterion_3),
        ("adjunction and monotonicity", criterion_4),
        ("erosion semigroup", criterion_5),
        ("viscosity-solution oracle", criterion_6),
        ("equivariance", criterion_7),
        ("gradient correctness", criterion_8),
        ("diffusion math", criterion_9),
        ("desk-scale training trend", criterion_10),
        ("determinism and persistence", criterion_11),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = Vec::new();
    for (i, (title, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let measures = run();
        if !report(id, title, &measures, start.elapsed()) {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
