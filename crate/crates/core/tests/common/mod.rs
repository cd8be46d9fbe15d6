//! Shared helpers for the integration suites.
#![allow(dead_code)]

use morphflow::autodiff::{ParamStore, StructuringDistance, Tape, Tensor, Var};
use morphflow::geometry::{left_regular_action, GridAction};
use morphflow::gmcunet::{CdeLayer, CdeSettings};
use morphflow::GridFunction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error, over all inputs, between the tape gradient of
/// `loss = Σ w ⊙ f(inputs)` and central differences with step `h`.
/// Each input's error is `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`.
pub fn grad_check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var, h: f64, seed: u64) -> f64 {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        randn(&mut rng(seed), tape.shape(out))
    };
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[i]);
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut vals = inputs.to_vec();
            vals[i].data_mut()[j] += h;
            let up = eval(&vals);
            vals[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&vals);
            numeric[j] = (up - down) / (2.0 * h);
        }
        let num = Tensor::new(input.shape().to_vec(), numeric).unwrap();
        let scale = analytic.max_abs().max(num.max_abs()).max(1e-8);
        worst = worst.max(analytic.max_abs_diff(&num) / scale);
    }
    worst
}

/// Applies a grid action to every sample of a `[B, C, H, W]` tensor.
pub fn act(action: &GridAction, t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(t.len());
    for b in 0..s[0] {
        let g = GridFunction::new(c, h, w, t.outer(b).to_vec()).unwrap();
        out.extend(left_regular_action(action, &g).unwrap().into_vec());
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// `‖a − b‖∞ / max(‖b‖∞, 1e-12)`.
pub fn rel_linf(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(1e-12)
}

pub fn settings(distance: StructuringDistance) -> CdeSettings {
    CdeSettings {
        k: 2.0,
        radius: 2,
        distance,
        metric_scale: 0.7,
        convection_time: 1.0,
    }
}

/// Parameters with every entry perturbed so no branch is trivially zero.
pub fn generic_params(layer: &CdeLayer, seed: u64, zero_velocity: bool) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut p = layer.init_params::<f64>(&mut r);
    for name in layer.param_names() {
        let id = p.id(name).unwrap();
        let shape = p.get(id).shape().to_vec();
        let noise = randn(&mut r, &shape);
        let t = p.get_mut(id);
        let amp = if name.ends_with("velocity") {
            if zero_velocity {
                0.0
            } else {
                1.5
            }
        } else {
            0.3
        };
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += amp * n;
        }
    }
    p
}

pub fn run_layer(layer: &CdeLayer, p: &ParamStore<f64>, x: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let bv = tape.constant(bias.clone());
    let y = layer.forward(&mut tape, &vars, xv, bv).unwrap();
    tape.value(y).clone()
}

/// Moves every per-channel parameter of the layer along `perm`.
pub fn permute_params(p: &ParamStore<f64>, perm: &[usize]) -> ParamStore<f64> {
    let c = perm.len();
    let mut out = p.clone();
    for (name, t) in p.iter() {
        let id = out.id(name).unwrap();
        let dst = out.get_mut(id);
        let s = t.data();
        match t.shape() {
            [n] if *n == c => {
                for i in 0..c {
                    dst.data_mut()[perm[i]] = s[i];
                }
            }
            [n, 2] if *n == c => {
                for i in 0..c {
                    dst.data_mut()[2 * perm[i]] = s[2 * i];
                    dst.data_mut()[2 * perm[i] + 1] = s[2 * i + 1];
                }
            }
            [a, b, 1, 1] if *a == c && *b == c => {
                for i in 0..c {
                    for j in 0..c {
                        dst.data_mut()[perm[i] * c + perm[j]] = s[i * c + j];
                    }
                }
            }
            other => panic!("unexpected parameter shape {other:?} for {name}"),
        }
    }
    out
}
