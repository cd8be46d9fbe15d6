//! Dense multi-channel functions sampled on a regular 2-D lattice.

use crate::error::GridError;

/// A real-valued function on a `channels × height × width` lattice, stored
/// row-major with channels outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GridFunction {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(GridError::Empty);
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(GridError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self, GridError> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Result<Self, GridError> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    /// Builds a grid by evaluating `f(channel, row, col)` at every sample.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, GridError> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Single-channel, single-row grid; handy for 1-D experiments.
    pub fn from_row(values: &[f64]) -> Result<Self, GridError> {
        Self::new(1, 1, values.len(), values.to_vec())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn same_shape(&self, other: &GridFunction) -> bool {
        self.shape() == other.shape()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    /// Periodic lookup: signed coordinates wrap around the torus.
    #[inline]
    pub fn get_wrapped(&self, c: usize, y: isize, x: isize) -> f64 {
        let yy = y.rem_euclid(self.height as isize) as usize;
        let xx = x.rem_euclid(self.width as isize) as usize;
        self.get(c, yy, xx)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same lattice, different sample values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<GridFunction, GridError> {
        GridFunction::new(self.channels, self.height, self.width, data)
    }

    pub fn neg(&self) -> GridFunction {
        self.map(|v| -v)
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |self - other|`; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &GridFunction) -> f64 {
        assert!(self.same_shape(other), "grid shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Mean absolute difference.
    pub fn l1_diff(&self, other: &GridFunction) -> f64 {
        assert!(self.same_shape(other), "grid shape mismatch");
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        s / self.data.len() as f64
    }

    /// `‖self − other‖∞ / max(‖other‖∞, tiny)`.
    pub fn relative_linf(&self, reference: &GridFunction) -> f64 {
        self.max_abs_diff(reference) / reference.linf_norm().max(f64::MIN_POSITIVE)
    }

    /// Pointwise `self <= other`.
    pub fn le(&self, other: &GridFunction) -> bool {
        assert!(self.same_shape(other), "grid shape mismatch");
        self.data.iter().zip(&other.data).all(|(a, b)| a <= b)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(GridFunction::zeros(0, 2, 2), Err(GridError::Empty)));
        assert!(matches!(
            GridFunction::new(1, 2, 2, vec![0.0; 3]),
            Err(GridError::LengthMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn wrapped_lookup() {
        let g = GridFunction::from_fn(1, 2, 3, |_, y, x| (y * 3 + x) as f64).unwrap();
        assert_eq!(g.get_wrapped(0, -1, -1), 5.0);
        assert_eq!(g.get_wrapped(0, 2, 4), 1.0);
    }
}
