//! Parameter registry and the primitive layers built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Padding, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{ModelError, TensorError};

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Constant(f64),
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations in registration order.
#[derive(Default)]
pub(crate) struct Registry {
    pub specs: Vec<ParamSpec>,
    prefix: Vec<String>,
}

impl Registry {
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.specs.push(ParamSpec {
            name: full,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    pub fn init<F: Scalar>(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> ParamStore<F> {
        let mut store = ParamStore::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<F> = match spec.init {
                Init::Zeros => vec![F::zero(); n],
                Init::Constant(v) => vec![F::of(v); n],
                Init::FanIn(fan) => {
                    let b = 1.0 / (fan as f64).sqrt();
                    (0..n).map(|_| F::of(rng.random_range(-b..b))).collect()
                }
            };
            let t = Tensor::new(spec.shape.clone(), data).expect("spec shape is consistent");
            store.add(spec.name.clone(), t).expect("registry names are unique");
        }
        store
    }
}

/// Largest group count not above `max` that divides `channels`.
pub(crate) fn group_count(channels: usize, max: usize) -> usize {
    (1..=max.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: usize,
    b: Option<usize>,
    stride: usize,
    padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        zero: bool,
    ) -> Self {
        reg.scope(name, |reg| {
            let init = if zero {
                Init::Zeros
            } else {
                Init::FanIn(cin * kernel * kernel)
            };
            Self {
                w: reg.param("weight", &[cout, cin, kernel, kernel], init),
                b: bias.then(|| reg.param("bias", &[cout], Init::Zeros)),
                stride,
                padding,
            }
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        tape.conv2d(x, p[self.w], self.b.map(|b| p[b]), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

impl Norm {
    pub fn new(reg: &mut Registry, name: &str, channels: usize, max_groups: usize) -> Self {
        reg.scope(name, |reg| Self {
            gamma: reg.param("gamma", &[channels], Init::Constant(1.0)),
            beta: reg.param("beta", &[channels], Init::Zeros),
            groups: group_count(channels, max_groups),
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        tape.group_norm(x, p[self.gamma], p[self.beta], self.groups)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(reg: &mut Registry, name: &str, din: usize, dout: usize) -> Self {
        reg.scope(name, |reg| Self {
            w: reg.param("weight", &[dout, din], Init::FanIn(din)),
            b: reg.param("bias", &[dout], Init::Zeros),
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        tape.linear(x, p[self.w], Some(p[self.b]))
    }
}

/// Sinusoidal features of integer steps: `(sin(t·ω_j), cos(t·ω_j))` pairs
/// with `ω_j` geometric from 1 down to 1/10000.
pub fn sinusoidal_features(steps: &[usize], dim: usize) -> Result<Tensor<f64>, ModelError> {
    if dim < 4 || !dim.is_multiple_of(2) {
        return Err(ModelError::Config(format!(
            "time feature size must be even and at least 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for j in 0..half {
            let omega = 10000f64.powf(-(j as f64) / (half - 1) as f64);
            let a = t as f64 * omega;
            data.push(a.sin());
            data.push(a.cos());
        }
    }
    Ok(Tensor::new(vec![steps.len(), dim], data)?)
}

/// Sinusoidal features followed by `linear → SiLU → linear`.
#[derive(Clone, Debug)]
pub(crate) struct TimeEmbedding {
    pub dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbedding {
    pub fn new(reg: &mut Registry, dim: usize, out: usize) -> Self {
        reg.scope("time", |reg| Self {
            dim,
            l1: Linear::new(reg, "fc1", dim, out),
            l2: Linear::new(reg, "fc2", out, out),
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &[Var], steps: &[usize]) -> Result<Var, ModelError> {
        let feats = tape.constant(sinusoidal_features(steps, self.dim)?.cast());
        let h = self.l1.forward(tape, p, feats)?;
        let h = tape.silu(h);
        Ok(self.l2.forward(tape, p, h)?)
    }
}
