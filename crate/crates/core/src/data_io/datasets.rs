//! Image datasets normalised to `[−1, 1]`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::DataError;
use crate::grid::GridFunction;

use super::idx::{IdxData, IdxKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    IdxFile,
    SyntheticShapes,
    GaussianToy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    images: Vec<GridFunction>,
    source: DatasetSource,
}

impl ImageDataset {
    /// Checks that all images share a shape and lie in `[−1, 1]`.
    pub fn new(images: Vec<GridFunction>, source: DatasetSource) -> Result<Self, DataError> {
        if let Some(first) = images.first() {
            for (i, img) in images.iter().enumerate() {
                if img.shape() != first.shape() {
                    return Err(DataError::Invalid(format!(
                        "image {i} has shape {:?}, expected {:?}",
                        img.shape(),
                        first.shape()
                    )));
                }
                if img.as_slice().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                    return Err(DataError::Invalid(format!("image {i} has values outside [-1, 1]")));
                }
            }
        }
        Ok(Self { images, source })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn source(&self) -> DatasetSource {
        self.source
    }

    pub fn images(&self) -> &[GridFunction] {
        &self.images
    }

    /// `(channels, height, width)`, or `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(GridFunction::shape)
    }

    /// Stacks the selected images into `[B, C, H, W]`.
    pub fn batch<F: Scalar>(&self, indices: &[usize]) -> Result<Tensor<F>, DataError> {
        let (c, h, w) = self
            .shape()
            .ok_or_else(|| DataError::Invalid("cannot batch an empty dataset".into()))?;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            let img = self
                .images
                .get(i)
                .ok_or_else(|| DataError::Invalid(format!("index {i} out of range")))?;
            data.extend(img.as_slice().iter().map(|&v| F::of(v)));
        }
        Tensor::new(vec![indices.len(), c, h, w], data).map_err(|e| DataError::Invalid(e.to_string()))
    }

    /// First `n` images and the rest.
    pub fn split(mut self, n: usize) -> (Self, Self) {
        let rest = self.images.split_off(n.min(self.images.len()));
        let source = self.source;
        (self, Self { images: rest, source })
    }
}

/// Splits a `[B, C, H, W]` tensor back into grid functions.
pub fn tensor_to_images<F: Scalar>(t: &Tensor<F>) -> Result<Vec<GridFunction>, DataError> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(DataError::Invalid(format!("expected [B, C, H, W], got {s:?}")));
    }
    (0..s[0])
        .map(|b| {
            let v = t.outer(b).iter().map(|x| x.as_f64()).collect();
            Ok(GridFunction::new(s[1], s[2], s[3], v)?)
        })
        .collect()
}

/// IDX image data as a dataset, `x / 127.5 − 1`.
pub fn idx_dataset(idx: &IdxData, limit: Option<usize>) -> Result<ImageDataset, DataError> {
    let (h, w) = idx
        .image_size()
        .ok_or_else(|| DataError::Invalid(format!("expected image data, found {:?}", IdxKind::Labels)))?;
    let n = limit.map_or(idx.count(), |l| l.min(idx.count()));
    let images = (0..n)
        .map(|i| {
            let v = idx.item(i).iter().map(|&b| b as f64 / 127.5 - 1.0).collect();
            GridFunction::new(1, h, w, v)
        })
        .collect::<Result<_, _>>()?;
    ImageDataset::new(images, DatasetSource::IdxFile)
}

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        angle: f64,
    },
    Segment {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        half_width: f64,
    },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, side: f64) -> Self {
        let centre = |rng: &mut ChaCha8Rng| rng.random_range(0.3 * side..0.7 * side);
        match rng.random_range(0..3) {
            0 => Shape::Disc {
                cx: centre(rng),
                cy: centre(rng),
                r: rng.random_range(0.15 * side..0.3 * side),
            },
            1 => Shape::Rect {
                cx: centre(rng),
                cy: centre(rng),
                hw: rng.random_range(0.12 * side..0.3 * side),
                hh: rng.random_range(0.12 * side..0.3 * side),
                angle: rng.random_range(0.0..PI),
            },
            _ => {
                let (cx, cy) = (centre(rng), centre(rng));
                let len = rng.random_range(0.25 * side..0.45 * side);
                let a = rng.random_range(0.0..PI);
                Shape::Segment {
                    x0: cx - len * a.cos(),
                    y0: cy - len * a.sin(),
                    x1: cx + len * a.cos(),
                    y1: cy + len * a.sin(),
                    half_width: rng.random_range(0.05 * side..0.1 * side),
                }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).hypot(y - cy) <= r,
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                (c * dx + s * dy).abs() <= hw && (-s * dx + c * dy).abs() <= hh
            }
            Shape::Segment {
                x0,
                y0,
                x1,
                y1,
                half_width,
            } => {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let t = (((x - x0) * vx + (y - y0) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
                (x - x0 - t * vx).hypot(y - y0 - t * vy) <= half_width
            }
        }
    }

    /// Fraction of the pixel `(px, py)` covered, by supersampling.
    fn coverage(&self, px: usize, py: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                hits += self.contains(x, y) as usize;
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

/// Anti-aliased white discs, rotated rectangles and thick line segments on
/// a black background, one shape per image.
pub fn make_synthetic_shapes(n: usize, side: usize, seed: u64) -> Result<ImageDataset, DataError> {
    if side < 8 {
        return Err(DataError::Invalid(format!(
            "synthetic shapes need side >= 8, got {side}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n)
        .map(|_| {
            let shape = Shape::random(&mut rng, side as f64);
            GridFunction::from_fn(1, side, side, |_, y, x| 2.0 * shape.coverage(x, y) - 1.0)
        })
        .collect::<Result<_, _>>()?;
    ImageDataset::new(images, DatasetSource::SyntheticShapes)
}

/// Pixels drawn independently from `N(0, std²)`, clipped to `[−1, 1]`.
pub fn make_gaussian_toy(n: usize, side: usize, std: f64, seed: u64) -> Result<ImageDataset, DataError> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(DataError::Invalid(format!(
            "gaussian toy std must be positive, got {std}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n)
        .map(|_| {
            GridFunction::from_fn(1, side, side, |_, _, _| {
                (std * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0)
            })
        })
        .collect::<Result<_, _>>()?;
    ImageDataset::new(images, DatasetSource::GaussianToy)
}

/// Angles (degrees) from which rotations are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RotationPolicy {
    /// One of the listed angles, uniformly.
    Angles { degrees: Vec<f64> },
    /// Uniform in `[min, max)`.
    Range { min: f64, max: f64 },
}

impl RotationPolicy {
    /// Uniform over the full circle.
    pub fn full_circle() -> Self {
        Self::Range { min: 0.0, max: 360.0 }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<f64, DataError> {
        match self {
            Self::Angles { degrees } if degrees.is_empty() => {
                Err(DataError::Invalid("rotation policy has no angles".into()))
            }
            Self::Angles { degrees } => Ok(degrees[rng.random_range(0..degrees.len())]),
            Self::Range { min, max } if !(min < max) => {
                Err(DataError::Invalid(format!("empty rotation range [{min}, {max})")))
            }
            Self::Range { min, max } => Ok(rng.random_range(*min..*max)),
        }
    }
}

/// Value used outside the rotated image: black.
pub const ROTATION_FILL: f64 = -1.0;

/// Rotates every channel by `degrees` about the image centre with bilinear
/// resampling; samples falling outside take [`ROTATION_FILL`]. Positive
/// angles turn `+x` (columns) towards `+y` (rows).
pub fn rotate_image(img: &GridFunction, degrees: f64) -> GridFunction {
    let (c, h, w) = img.shape();
    let a = degrees.rem_euclid(360.0).to_radians();
    let (s, co) = if a == 0.0 { (0.0, 1.0) } else { a.sin_cos() };
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let sample = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            ROTATION_FILL
        } else {
            img.get(ch, y as usize, x as usize)
        }
    };
    GridFunction::from_fn(c, h, w, |ch, y, x| {
        // inverse rotation of the output position
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = co * dx + s * dy + cx;
        let sy = -s * dx + co * dy + cy;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (ax, ay) = (sx - x0, sy - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let mut v = (1.0 - ay) * (1.0 - ax) * sample(ch, yi, xi);
        if ax != 0.0 {
            v += (1.0 - ay) * ax * sample(ch, yi, xi + 1);
        }
        if ay != 0.0 {
            v += ay * (1.0 - ax) * sample(ch, yi + 1, xi);
            if ax != 0.0 {
                v += ay * ax * sample(ch, yi + 1, xi + 1);
            }
        }
        v.clamp(-1.0, 1.0)
    })
    .expect("same shape as input")
}

/// Each image rotated by an angle drawn from `policy`.
pub fn rotate_dataset(ds: &ImageDataset, policy: &RotationPolicy, seed: u64) -> Result<ImageDataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = ds
        .images()
        .iter()
        .map(|img| Ok(rotate_image(img, policy.draw(&mut rng)?)))
        .collect::<Result<_, DataError>>()?;
    ImageDataset::new(images, ds.source())
}
