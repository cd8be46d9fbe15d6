//! Denoising diffusion: the variance-preserving forward process, its
//! Gaussian posterior, the ε-prediction losses and the ancestral sampler.
//!
//! Steps are 1-based: `t ∈ [1, T]`, with `n_0` the data and `n_T` close to
//! standard normal. Schedule arithmetic is done in `f64`; tensor-valued
//! functions are generic over the element type.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Scalar, Tensor};
use crate::error::DiffusionError;

/// How β is spread over the steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Per-step noise levels and their running products.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// β interpolated from `beta_start` to `beta_end` over `steps` steps.
    pub fn new(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::InvalidSchedule("need at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
        };
        Self::from_betas(beta)
    }

    /// Schedule from explicit β values in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self, DiffusionError> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule("every beta must lie in (0, 1)".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// Linear schedule from 1e-4 to 0.02.
    pub fn standard(steps: usize) -> Result<Self, DiffusionError> {
        Self::new(steps, 1e-4, 0.02, ScheduleKind::Linear)
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                t,
                min: 1,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Reverse-process variance, fixed to β_t.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Factor `w_t` with `KL_t = w_t ‖ε − ε̂‖²` when σ_t² = β_t.
    pub fn kl_weight(&self, t: usize) -> f64 {
        self.beta(t) / (2.0 * self.alpha(t) * (1.0 - self.alpha_bar(t)))
    }
}

fn same_shape<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(DiffusionError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `ca·a + cb·b` elementwise, coefficients applied in `f64`.
fn affine<F: Scalar>(a: &Tensor<F>, ca: f64, b: &Tensor<F>, cb: f64) -> Tensor<F> {
    let (ca, cb) = (F::of(ca), F::of(cb));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| ca * x + cb * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

/// Standard normal tensor.
pub fn standard_normal<F: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

/// `n_t = √ᾱ_t n_0 + √(1 − ᾱ_t) ε`.
pub fn forward_sample<F: Scalar>(
    n0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<F>, DiffusionError> {
    sched.check_step(t)?;
    same_shape(n0, eps)?;
    let ab = sched.alpha_bar(t);
    Ok(affine(n0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// [`forward_sample`] with one step per leading-axis sample.
pub fn forward_sample_batch<F: Scalar>(
    n0: &Tensor<F>,
    steps: &[usize],
    eps: &Tensor<F>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<F>, DiffusionError> {
    same_shape(n0, eps)?;
    let batch = n0.shape()[0];
    if steps.len() != batch {
        return Err(DiffusionError::Shape(format!(
            "{} steps for {batch} samples",
            steps.len()
        )));
    }
    let mut out = Vec::with_capacity(n0.len());
    for (i, &t) in steps.iter().enumerate() {
        sched.check_step(t)?;
        let ab = sched.alpha_bar(t);
        let (ca, cb) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        out.extend(n0.outer(i).iter().zip(eps.outer(i)).map(|(&x, &e)| ca * x + cb * e));
    }
    Ok(Tensor::new(n0.shape().to_vec(), out).expect("same shape as input"))
}

/// One forward kernel step `n_t = √α_t n_{t−1} + √β_t ε`.
pub fn forward_step<F: Scalar>(
    prev: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<F>, DiffusionError> {
    sched.check_step(t)?;
    same_shape(prev, eps)?;
    Ok(affine(prev, sched.alpha(t).sqrt(), eps, sched.beta(t).sqrt()))
}

/// Posterior mean `(n_t − β_t/√(1 − ᾱ_t) · ε) / √α_t`.
pub fn posterior_mean<F: Scalar>(
    n_t: &Tensor<F>,
    eps: &Tensor<F>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Tensor<F>, DiffusionError> {
    sched.check_step(t)?;
    same_shape(n_t, eps)?;
    let ra = 1.0 / sched.alpha(t).sqrt();
    let c = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(affine(n_t, ra, eps, -ra * c))
}

/// Ancestral step `μ_t + √β_t · noise`, with the noise dropped at `t = 1`.
pub fn reverse_step<F: Scalar>(
    n_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    sched: &DiffusionSchedule,
    noise: &Tensor<F>,
) -> Result<Tensor<F>, DiffusionError> {
    same_shape(n_t, noise)?;
    let mean = posterior_mean(n_t, eps_hat, t, sched)?;
    if t == 1 {
        return Ok(mean);
    }
    Ok(affine(&mean, 1.0, noise, sched.sigma2(t).sqrt()))
}

/// KL divergence between `N(μ_true, σ²I)` and `N(μ_model, σ²I)`.
pub fn kl_term<F: Scalar>(mu_true: &Tensor<F>, mu_model: &Tensor<F>, sigma2: f64) -> Result<f64, DiffusionError> {
    same_shape(mu_true, mu_model)?;
    let sq: f64 = mu_true
        .data()
        .iter()
        .zip(mu_model.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sq / (2.0 * sigma2))
}

/// Anything that predicts the noise in `n_t`, one step per sample.
pub trait NoisePredictor<F: Scalar> {
    fn predict_noise(&self, n_t: &Tensor<F>, steps: &[usize]) -> crate::Result<Tensor<F>>;
}

impl<F: Scalar, P: Fn(&Tensor<F>, &[usize]) -> crate::Result<Tensor<F>>> NoisePredictor<F> for P {
    fn predict_noise(&self, n_t: &Tensor<F>, steps: &[usize]) -> crate::Result<Tensor<F>> {
        self(n_t, steps)
    }
}

/// Noised batch: `n_t` for per-sample steps drawn uniformly from `[1, T]`.
pub struct NoisedBatch<F> {
    pub steps: Vec<usize>,
    pub noise: Tensor<F>,
    pub noised: Tensor<F>,
}

pub fn noise_batch<F: Scalar, R: Rng + ?Sized>(
    n0: &Tensor<F>,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<NoisedBatch<F>, DiffusionError> {
    let batch = n0.shape()[0];
    if n0.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let steps: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=sched.steps())).collect();
    let noise = standard_normal(rng, n0.shape());
    let noised = forward_sample_batch(n0, &steps, &noise, sched)?;
    Ok(NoisedBatch { steps, noise, noised })
}

/// Mean over all entries of `(ε − ε̂)²`.
pub fn mse<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    s / a.len() as f64
}

/// ε-prediction loss on one random noising of the batch.
pub fn simple_loss<F: Scalar, R: Rng + ?Sized>(
    n0: &Tensor<F>,
    sched: &DiffusionSchedule,
    model: &dyn NoisePredictor<F>,
    rng: &mut R,
) -> crate::Result<f64> {
    let nb = noise_batch(n0, sched, rng)?;
    let pred = model.predict_noise(&nb.noised, &nb.steps)?;
    same_shape(&pred, &nb.noise)?;
    Ok(mse(&nb.noise, &pred))
}

/// Per-step terms of the variational bound on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboTerms {
    /// Steps `2..=T`.
    pub steps: Vec<usize>,
    /// Mean over the batch of the KL term at each step.
    pub kl: Vec<f64>,
    /// Mean over the batch of `‖ε − ε̂‖²` at each step (same noise).
    pub eps_sq: Vec<f64>,
    /// Mean over the batch of `log N(n_0; μ_θ(n_1, 1), σ_1² I)`.
    pub reconstruction: f64,
}

impl ElboTerms {
    /// Negative bound without the prior term: `Σ KL_t − reconstruction`.
    pub fn total(&self) -> f64 {
        self.kl.iter().sum::<f64>() - self.reconstruction
    }
}

/// KL terms against the true posterior for every step, plus the
/// reconstruction log-likelihood, with fresh noise per step.
pub fn elbo_terms<F: Scalar, R: Rng + ?Sized>(
    n0: &Tensor<F>,
    sched: &DiffusionSchedule,
    model: &dyn NoisePredictor<F>,
    rng: &mut R,
) -> crate::Result<ElboTerms> {
    let batch = n0.shape()[0];
    if n0.is_empty() {
        return Err(DiffusionError::EmptyBatch.into());
    }
    let per_sample: usize = n0.len() / batch;
    let mut terms = ElboTerms {
        steps: Vec::new(),
        kl: Vec::new(),
        eps_sq: Vec::new(),
        reconstruction: 0.0,
    };
    for t in 1..=sched.steps() {
        let eps: Tensor<F> = standard_normal(rng, n0.shape());
        let n_t = forward_sample(n0, t, &eps, sched)?;
        let eps_hat = model.predict_noise(&n_t, &vec![t; batch])?;
        same_shape(&eps_hat, &eps)?;
        let mu_model = posterior_mean(&n_t, &eps_hat, t, sched)?;
        if t == 1 {
            let s2 = sched.sigma2(1);
            let sq = kl_term(n0, &mu_model, 1.0)? * 2.0;
            let norm = per_sample as f64 * 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
            terms.reconstruction = -sq / (2.0 * s2) / batch as f64 - norm;
            continue;
        }
        let mu_true = posterior_mean(&n_t, &eps, t, sched)?;
        terms.steps.push(t);
        terms
            .kl
            .push(kl_term(&mu_true, &mu_model, sched.sigma2(t))? / batch as f64);
        terms.eps_sq.push(mse(&eps, &eps_hat) * n0.len() as f64 / batch as f64);
    }
    Ok(terms)
}

/// Ancestral sampling from `n_T ~ N(0, I)` down to `n_0`. `observe` sees
/// every intermediate `n_{t−1}` together with `t − 1`.
pub fn sample<F: Scalar, R: Rng + ?Sized>(
    model: &dyn NoisePredictor<F>,
    sched: &DiffusionSchedule,
    shape: &[usize],
    rng: &mut R,
    mut observe: impl FnMut(usize, &Tensor<F>),
) -> crate::Result<Tensor<F>> {
    let batch = shape[0];
    let mut n: Tensor<F> = standard_normal(rng, shape);
    observe(sched.steps(), &n);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = model.predict_noise(&n, &vec![t; batch])?;
        let noise = if t > 1 {
            standard_normal(rng, shape)
        } else {
            Tensor::zeros(shape)
        };
        n = reverse_step(&n, &eps_hat, t, sched, &noise)?;
        observe(t - 1, &n);
    }
    Ok(n)
}

/// Optimal noise predictor when the data are `N(0, s²)` per coordinate.
pub fn gaussian_optimal_predictor(
    sched: &DiffusionSchedule,
    data_var: f64,
) -> impl Fn(&Tensor<f64>, &[usize]) -> crate::Result<Tensor<f64>> + '_ {
    move |n_t: &Tensor<f64>, steps: &[usize]| {
        let mut out = Vec::with_capacity(n_t.len());
        for (i, &t) in steps.iter().enumerate() {
            let ab = sched.alpha_bar(t);
            let c = (1.0 - ab).sqrt() / (ab * data_var + 1.0 - ab);
            out.extend(n_t.outer(i).iter().map(|v| c * v));
        }
        Ok(Tensor::new(n_t.shape().to_vec(), out)?)
    }
}
