use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 1e-3,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores a saved state; moment shapes must match the parameters.
    pub fn restore(
        &mut self,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        params: &ParamStore,
    ) -> Result<()> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Shape(
                "optimizer state does not cover every parameter".into(),
            ));
        }
        for ((_, p), (a, b)) in params.iter().zip(m.iter().zip(&v)) {
            if a.shape() != p.value.shape() || b.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "optimizer moments for `{}` have the wrong shape",
                    p.name
                )));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(name) = params.first_non_finite_grad() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape(
                "optimizer was built for a different parameter set".into(),
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let values = p.value.data_mut();
            for (((x, &g), m), v) in values
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g as f64;
                let mn = c.beta1 * *m as f64 + (1.0 - c.beta1) * g;
                let vn = c.beta2 * *v as f64 + (1.0 - c.beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                *x = (*x as f64 * decay - c.lr * update) as f32;
            }
        }
        params.zero_grad();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub beta: f64,
    pub power: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            beta: 0.995,
            power: 0.7,
        }
    }
}

impl EmaConfig {
    /// `min(beta, (1 − 1/(step+1))^power)`.
    pub fn decay(&self, step: u64) -> f64 {
        let warm = (1.0 - 1.0 / (step as f64 + 1.0)).powf(self.power);
        warm.min(self.beta)
    }
}

/// Exponential moving average of parameter values.
///
/// The average is kept as an `f32` shadow plus an `f32` rounding residual so
/// that updates smaller than half an ulp of the shadow are not lost.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub config: EmaConfig,
    shadow: Vec<Tensor>,
    residual: Vec<Tensor>,
}

impl Ema {
    pub fn new(config: EmaConfig, params: &ParamStore) -> Self {
        Self {
            config,
            shadow: params.iter().map(|(_, p)| p.value.clone()).collect(),
            residual: params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect(),
        }
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn residual(&self) -> &[Tensor] {
        &self.residual
    }

    pub fn restore(
        &mut self,
        shadow: Vec<Tensor>,
        residual: Vec<Tensor>,
        params: &ParamStore,
    ) -> Result<()> {
        let fits = |v: &[Tensor]| {
            v.len() == params.len()
                && params
                    .iter()
                    .zip(v)
                    .all(|((_, p), s)| s.shape() == p.value.shape())
        };
        if !fits(&shadow) || !fits(&residual) {
            return Err(Error::Shape(
                "EMA shadow does not match the parameters".into(),
            ));
        }
        self.shadow = shadow;
        self.residual = residual;
        Ok(())
    }

    pub fn update(&mut self, params: &ParamStore, step: u64) {
        let d = self.config.decay(step);
        for ((s, r), (_, p)) in self
            .shadow
            .iter_mut()
            .zip(&mut self.residual)
            .zip(params.iter())
        {
            for ((s, r), &x) in s
                .data_mut()
                .iter_mut()
                .zip(r.data_mut())
                .zip(p.value.data())
            {
                let avg = d * (*s as f64 + *r as f64) + (1.0 - d) * x as f64;
                *s = avg as f32;
                *r = (avg - *s as f64) as f32;
            }
        }
    }

    /// Copies the shadow values into `params`.
    pub fn apply_to(&self, params: &mut ParamStore) {
        for (p, s) in params.iter_mut().zip(&self.shadow) {
            p.value.data_mut().copy_from_slice(s.data());
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm when clipping happened.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> Option<f64> {
    let norm = params.grad_norm();
    if !(norm > max_norm) {
        return None;
    }
    let scale = (max_norm / norm) as f32;
    for p in params.iter_mut() {
        for g in p.grad.data_mut() {
            *g *= scale;
        }
    }
    Some(norm)
}
