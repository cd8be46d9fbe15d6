use crate::error::TensorError;

use super::ops_morph::{StructuringDistance, WindowKind};
use super::ops_nn::Padding;
use super::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Square(Var),
    Silu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    AddChannel {
        x: Var,
        b: Var,
        per_batch: bool,
    },
    MulChannel {
        x: Var,
        s: Var,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax(Var),
    UpsampleNearest(Var),
    Window {
        x: Var,
        penalty: Var,
        radius: usize,
        kind: WindowKind,
        arg: Vec<u32>,
    },
    StructuringPenalty {
        t: Var,
        scale: Var,
        k: f64,
        radius: usize,
        distance: StructuringDistance,
    },
    Shift {
        x: Var,
        velocity: Var,
        time: f64,
    },
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation. Parents always precede
/// their children, so a reverse sweep is a valid topological order.
pub struct Tape<F> {
    pub(crate) nodes: Vec<Node<F>>,
    check_finite: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    /// New tape; inputs are screened for NaN/∞ in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op result; it needs a gradient iff any input does.
    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, rg)
    }

    pub(crate) fn check_inputs(&self, op: &'static str, inputs: &[Var]) -> Result<(), TensorError> {
        if self.check_finite && inputs.iter().any(|v| !self.nodes[v.0].value.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d = *d - g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d = *d + g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d = *d + g * x;
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |d| {
                for (d, &g) in d.iter_mut().zip(g) {
                    *d = *d + g * *c;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, |d| add_into(d, g)),
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    let two = F::of(2.0);
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d = *d + two * x * g;
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        let s = F::one() / (F::one() + (-x).exp());
                        *d = *d + g * s * (F::one() + x * (F::one() - s));
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d = *d + g / (F::one() + (-x).exp());
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |d| {
                for d in d.iter_mut() {
                    *d = *d + g[0];
                }
            }),
            Op::Mean(a) => {
                let n = F::of(self.value(*a).len() as f64);
                self.accumulate(grads, *a, |d| {
                    for d in d.iter_mut() {
                        *d = *d + g[0] / n;
                    }
                });
            }
            Op::MatMul { .. } => self.backward_matmul(&node.op, g, grads),
            Op::AddChannel { .. } | Op::MulChannel { .. } => self.backward_channel(&node.op, g, grads),
            Op::Concat(_) | Op::SliceChannels { .. } => self.backward_channels_layout(i, g, grads),
            Op::Conv2d { .. } => self.backward_conv2d(i, g, grads),
            Op::GroupNorm { .. } => self.backward_group_norm(i, g, grads),
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("softmax input has a last axis");
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: F = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d = *d + y * (g - dot);
                        }
                    }
                });
            }
            Op::UpsampleNearest(_) => self.backward_upsample(i, g, grads),
            Op::Window { .. } => self.backward_window(i, g, grads),
            Op::StructuringPenalty { .. } => self.backward_penalty(i, g, grads),
            Op::Shift { .. } => self.backward_shift(i, g, grads),
        }
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it on first use.
    pub(crate) fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
        f(buf);
    }
}

fn add_into<F: Scalar>(d: &mut [F], g: &[F]) {
    for (d, &g) in d.iter_mut().zip(g) {
        *d = *d + g;
    }
}

/// Gradients of a scalar with respect to every differentiable leaf.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Raw gradient buffer, `None` when `v` is detached from the loss.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like the value of `v`; zeros when detached.
    pub fn wrt(&self, tape: &Tape<F>, v: Var) -> Tensor<F> {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }
}
