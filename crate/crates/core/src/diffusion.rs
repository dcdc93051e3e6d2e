//! v-objective diffusion: noise schedule, forward noising, v-targets, the
//! training loss and deterministic DDIM sampling.
//!
//! A noise level `σ ∈ [0, 1]` maps to the angle `φ = σ·π/2` with mixing
//! weights `α = cos φ` and `β = sin φ`. A noisy sample is `x_σ = α·x0 + β·ε`
//! and the model regresses the velocity `v = α·ε − β·x0`.

use std::f64::consts::FRAC_PI_2;

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Mixing weights for one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionCoeffs {
    pub sigma: f64,
    pub phi: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn coeffs(sigma: f64) -> Result<DiffusionCoeffs> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidArgument(format!(
            "noise level {sigma} outside [0, 1]"
        )));
    }
    let phi = FRAC_PI_2 * sigma;
    // cos(π/2) is not exactly zero in floating point.
    let (alpha, beta) = if sigma == 1.0 {
        (0.0, 1.0)
    } else {
        (phi.cos(), phi.sin())
    };
    Ok(DiffusionCoeffs {
        sigma,
        phi,
        alpha,
        beta,
    })
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("f64 converts to any float type")
}

fn check_len<T>(a: &[T], b: &[T], op: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{op}: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `α·x0 + β·ε`.
pub fn add_noise<T: Float>(x0: &[T], eps: &[T], sigma: f64) -> Result<Vec<T>> {
    check_len(x0, eps, "add_noise")?;
    let c = coeffs(sigma)?;
    let (a, b) = (cast::<T>(c.alpha), cast::<T>(c.beta));
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// `α·ε − β·x0`.
///
/// This is the derivative of `x_σ` with respect to the angle φ; the derivative
/// with respect to σ carries an extra factor π/2.
pub fn v_target<T: Float>(x0: &[T], eps: &[T], sigma: f64) -> Result<Vec<T>> {
    check_len(x0, eps, "v_target")?;
    let c = coeffs(sigma)?;
    let (a, b) = (cast::<T>(c.alpha), cast::<T>(c.beta));
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * e - b * x).collect())
}

/// A velocity predictor `f(x_σ, σ) → v̂`, with any conditioning captured by the implementor.
pub trait DenoiseFn<T> {
    fn predict_v(&self, x: &[T], sigma: f64) -> Result<Vec<T>>;
}

impl<T, F> DenoiseFn<T> for F
where
    F: Fn(&[T], f64) -> Result<Vec<T>>,
{
    fn predict_v(&self, x: &[T], sigma: f64) -> Result<Vec<T>> {
        self(x, sigma)
    }
}

fn predict<T: Float>(model: &impl DenoiseFn<T>, x: &[T], sigma: f64) -> Result<Vec<T>> {
    let v = model.predict_v(x, sigma)?;
    if v.len() != x.len() {
        return Err(Error::Shape(format!(
            "denoiser returned {} values for an input of {}",
            v.len(),
            x.len()
        )));
    }
    Ok(v)
}

/// Mean squared error between the model's velocity and the true target.
pub fn v_loss<T: Float>(model: &impl DenoiseFn<T>, x0: &[T], eps: &[T], sigma: f64) -> Result<f64> {
    let noisy = add_noise(x0, eps, sigma)?;
    let target = v_target(x0, eps, sigma)?;
    let v = predict(model, &noisy, sigma)?;
    let n = target.len().max(1) as f64;
    let loss = v
        .iter()
        .zip(&target)
        .map(|(&p, &t)| {
            let d = (p - t).to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum::<f64>()
        / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "v-loss diverged at sigma {sigma}"
        )));
    }
    Ok(loss)
}

/// Evenly spaced noise levels from 1 down to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSchedule {
    sigmas: Vec<f64>,
}

impl SamplerSchedule {
    /// `σ_i = i / steps` for `i = steps, …, 0`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "sampling needs at least one step".into(),
            ));
        }
        let sigmas = (0..=steps).rev().map(|i| i as f64 / steps as f64).collect();
        Ok(Self { sigmas })
    }

    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        let ok = sigmas.len() >= 2
            && sigmas[0] == 1.0
            && *sigmas.last().expect("len >= 2") == 0.0
            && sigmas.windows(2).all(|w| w[0] > w[1]);
        if !ok {
            return Err(Error::InvalidArgument(
                "schedule must decrease strictly from 1 to 0".into(),
            ));
        }
        Ok(Self { sigmas })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// One DDIM update from `σ_t` to `σ_prev`.
pub fn ddim_step<T: Float>(
    model: &impl DenoiseFn<T>,
    x_t: &[T],
    sigma_t: f64,
    sigma_prev: f64,
) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&sigma_t) || !(0.0..=1.0).contains(&sigma_prev) || sigma_prev > sigma_t
    {
        return Err(Error::InvalidArgument(format!(
            "ddim step needs 0 <= sigma_prev <= sigma_t <= 1, got {sigma_prev} -> {sigma_t}"
        )));
    }
    if sigma_prev == sigma_t {
        return Ok(x_t.to_vec());
    }
    let now = coeffs(sigma_t)?;
    let next = coeffs(sigma_prev)?;
    let v = predict(model, x_t, sigma_t)?;
    let (a, b) = (cast::<T>(now.alpha), cast::<T>(now.beta));
    let (a_prev, b_prev) = (cast::<T>(next.alpha), cast::<T>(next.beta));
    Ok(x_t
        .iter()
        .zip(&v)
        .map(|(&x, &v)| {
            let x0 = a * x - b * v;
            let eps = b * x + a * v;
            a_prev * x0 + b_prev * eps
        })
        .collect())
}

/// Runs DDIM over the whole schedule starting from `noise` at `σ = 1`.
pub fn sample<T: Float>(
    model: &impl DenoiseFn<T>,
    noise: &[T],
    schedule: &SamplerSchedule,
) -> Result<Vec<T>> {
    schedule
        .sigmas()
        .windows(2)
        .try_fold(noise.to_vec(), |x, w| ddim_step(model, &x, w[0], w[1]))
}

/// A training batch noised at one random level per element.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub sigmas: Vec<f32>,
    pub noisy: Tensor,
    pub target: Tensor,
}

/// Draws `σ ~ U[0, 1)` per batch element and `ε ~ N(0, 1)` per value, then
/// forms the noisy inputs and v-targets for a `[B, ...]` batch `x0`.
pub fn noise_batch(x0: &Tensor, rng: &mut impl Rng) -> Result<NoisedBatch> {
    let batch = *x0
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("batch tensor has no leading axis".into()))?;
    let per = x0.len() / batch.max(1);
    let mut sigmas = Vec::with_capacity(batch);
    let mut noisy = Vec::with_capacity(x0.len());
    let mut target = Vec::with_capacity(x0.len());
    for item in x0.data().chunks_exact(per) {
        let sigma = rng.random::<f32>() as f64;
        let eps: Vec<f32> = (0..per)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        noisy.extend(add_noise(item, &eps, sigma)?);
        target.extend(v_target(item, &eps, sigma)?);
        sigmas.push(sigma as f32);
    }
    Ok(NoisedBatch {
        sigmas,
        noisy: Tensor::new(x0.shape().to_vec(), noisy)?,
        target: Tensor::new(x0.shape().to_vec(), target)?,
    })
}

/// Standard normal tensor of the given shape.
pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f32, _>(StandardNormal))
}
