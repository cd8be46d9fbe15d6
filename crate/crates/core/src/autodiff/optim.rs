//! Named parameter storage, Adam and exponential moving averages.

use std::collections::HashMap;

use crate::error::{OptimError, TensorError};

use super::{Gradients, Scalar, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for optimizer state and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Invalid {
                op: "param_store",
                detail: format!("duplicate parameter `{name}`"),
            });
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same names and shapes with every entry converted to `G`.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces all values, keeping names; shapes must match.
    pub fn assign(&mut self, other: &ParamStore<F>) -> Result<(), OptimError> {
        self.check_compatible(other)?;
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    fn check_compatible(&self, other: &ParamStore<F>) -> Result<(), OptimError> {
        for (i, name) in self.names.iter().enumerate() {
            let Some(&j) = other.index.get(name) else {
                return Err(OptimError::MissingGradient(name.clone()));
            };
            if other.tensors[j].shape() != self.tensors[i].shape() || i != j {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    expected: self.tensors[i].len(),
                    actual: other.tensors[j].len(),
                });
            }
        }
        if other.len() != self.len() {
            let extra = other.names.iter().find(|n| !self.index.contains_key(*n));
            return Err(OptimError::MissingGradient(extra.cloned().unwrap_or_default()));
        }
        Ok(())
    }

    /// Puts every parameter on `tape` as a differentiable leaf, in order.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Puts every parameter on `tape` as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Gradient buffers for the leaves returned by [`ParamStore::bind`];
    /// parameters the loss does not reach get zeros.
    pub fn collect_grads(&self, tape: &Tape<F>, grads: &Gradients<F>, vars: &[Var]) -> Vec<Tensor<F>> {
        vars.iter().map(|&v| grads.wrt(tape, v)).collect()
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are stored per parameter in the
/// store's order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig, params: &ParamStore<F>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Rebuilds optimizer state, e.g. from a checkpoint.
    pub fn from_state(config: AdamConfig, step: u64, first: Vec<Tensor<F>>, second: Vec<Tensor<F>>) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<F>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<F>] {
        &self.second
    }

    /// One update. Nothing is modified if any gradient is non-finite or
    /// misshapen.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Tensor<F>]) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            let name = params.names().get(grads.len()).cloned().unwrap_or_default();
            return Err(OptimError::MissingGradient(name));
        }
        for (i, g) in grads.iter().enumerate() {
            let p = &params.tensors[i];
            if g.len() != p.len() || self.first[i].len() != p.len() {
                return Err(OptimError::ShapeMismatch {
                    name: params.names[i].clone(),
                    expected: p.len(),
                    actual: g.len(),
                });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient {
                    name: params.names[i].clone(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let step_size = F::of(lr / bc1);
        let (rbc2, feps) = (F::of(1.0 / bc2), F::of(eps));
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensors[i].data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                p[j] = p[j] - step_size * m[j] / ((v[j] * rbc2).sqrt() + feps);
            }
        }
        Ok(())
    }
}

/// `shadow ← decay · shadow + (1 − decay) · params`.
pub fn ema_update<F: Scalar>(shadow: &mut ParamStore<F>, params: &ParamStore<F>, decay: f64) -> Result<(), OptimError> {
    shadow.check_compatible(params)?;
    let (d, od) = (F::of(decay), F::of(1.0 - decay));
    for (s, p) in shadow.tensors.iter_mut().zip(&params.tensors) {
        for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
            *s = d * *s + od * p;
        }
    }
    Ok(())
}
