use crate::error::TensorError;

use super::Scalar;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || n != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} does not hold {} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), data.iter().map(|&v| F::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!(self.shape, other.shape, "tensor shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// Converts element type.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }

    /// Slice of one leading-axis entry (e.g. one image of a batch).
    pub fn outer(&self, i: usize) -> &[F] {
        let inner = self.data.len() / self.shape[0];
        &self.data[i * inner..(i + 1) * inner]
    }
}
