use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid must have at least one channel, row and column")]
    Empty,
    #[error("grid data has {actual} samples, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("grid shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lies outside the open unit ball (squared norm {norm_sq})")]
    OutsideBall { norm_sq: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("linear part is not orthogonal (max |AᵀA − I| = {deviation:e})")]
    NotOrthogonal { deviation: f64 },
    #[error("transform does not map the lattice onto itself: {0}")]
    NotLatticePreserving(String),
    #[error("invalid channel permutation: {0}")]
    InvalidPermutation(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MorphError {
    #[error("structuring exponent k must exceed 1, got {0}")]
    InvalidExponent(f64),
    #[error("structuring scale t must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("metric scale must be positive and finite, got {0}")]
    InvalidMetricScale(f64),
    #[error("window radius must be at least 1")]
    InvalidRadius,
    #[error("window radius {radius} exceeds grid extent {height}x{width}")]
    WindowTooLarge { radius: usize, height: usize, width: usize },
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("grid spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("CFL number must lie in (0, 1], got {0}")]
    InvalidCfl(f64),
    #[error("convection velocity must be finite")]
    NonFiniteVelocity,
    #[error("expected {expected} per-channel velocities, got {actual}")]
    VelocityCount { expected: usize, actual: usize },
    #[error("finite-difference solver became unstable at step {step} (time {time:.6}): non-finite value")]
    Unstable { step: usize, time: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("gradient for `{name}` has {actual} entries, parameter has {expected}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model expects {expected} parameters, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("input shape {actual:?} does not match the model (expected {expected:?})")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("{steps} time steps for a batch of {batch}")]
    StepCount { steps: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("diffusion step {t} outside [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch is empty")]
    EmptyBatch,
}

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated IDX data: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad IDX magic {0:#010x}")]
    BadMagic(u32),
    #[error("label magic with image dims")]
    LabelMagicWithImageDims,
    #[error("expected {expected} IDX data, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("IDX dimensions {0:?} overflow the addressable size")]
    DimOverflow(Vec<u32>),
    #[error("{0} trailing bytes after IDX payload")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt payload: {0}")]
    Corrupt(String),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("array `{0}` missing from checkpoint")]
    MissingArray(String),
    #[error("unexpected array `{0}` in checkpoint")]
    ExtraArray(String),
    #[error("array `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Config validation failure, always naming the offending key.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("config key `{key}`: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl Error {
    /// True for failures caused by NaN or infinite values.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. }
                | Error::Diverged { .. }
                | Error::Tensor(TensorError::NonFinite { .. })
                | Error::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
                | Error::Optim(OptimError::NonFiniteGradient { .. })
        )
    }
}

/// Umbrella error for the end-to-end pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Morph(#[from] MorphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
