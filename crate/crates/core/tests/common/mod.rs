//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod grads;

use mudiff::nn::{Graph, ParamStore, Tensor, Var};
use mudiff::signal::{stft, StftConfig, Waveform};
use mudiff::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// `Σ out · w` accumulated in f64.
fn dot64(out: &Tensor, w: &Tensor) -> f64 {
    out.data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference check of `f` with respect to every input. Returns the
/// worst norm-wise relative error over inputs, sampling at most `samples`
/// elements per input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f32, samples: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let forward = |vals: &[Tensor]| -> Tensor {
        let mut g = Graph::inference();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = forward(inputs).shape().to_vec();
    let weights = uniform(&shape, 1.0, &mut rng);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let loss = g.weighted_sum(out, &weights).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let ga = grads
            .get(vars[i])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let picks: Vec<usize> = if input.len() <= samples {
            (0..input.len()).collect()
        } else {
            (0..samples)
                .map(|_| rng.random_range(0..input.len()))
                .collect()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &j in &picks {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let h = (plus[i].data()[j] - minus[i].data()[j]) as f64;
            let fd = (dot64(&forward(&plus), &weights) - dot64(&forward(&minus), &weights)) / h;
            analytic.push(ga[j] as f64);
            numeric.push(fd);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Central-difference check of a scalar loss with respect to `count` random
/// parameter entries of `store`.
pub fn param_grad_check<F>(f: F, store: &mut ParamStore, eps: f32, count: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store).unwrap();
    g.backward_into(loss, store).unwrap();
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::inference();
        let l = f(&mut g, s).unwrap();
        g.value(l).data()[0] as f64
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..count {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..store.get(id).value.len());
        let a = store.get(id).grad.data()[j] as f64;
        let orig = store.get(id).value.data()[j];
        store.get_mut(id).value.data_mut()[j] = orig + eps;
        let up = eval(store);
        store.get_mut(id).value.data_mut()[j] = orig - eps;
        let down = eval(store);
        store.get_mut(id).value.data_mut()[j] = orig;
        numeric.push((up - down) / (2.0 * eps as f64));
        analytic.push(a);
    }
    rel_err(&analytic, &numeric)
}

/// Relative L2 distance between magnitude spectrograms.
pub fn spectral_error(reference: &Waveform, other: &Waveform, config: StftConfig) -> f64 {
    let a = stft(reference, config).unwrap();
    let b = stft(other, config).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.magnitude.iter().zip(&b.magnitude) {
        num += ((x - y) as f64).powi(2);
        den += (*x as f64).powi(2);
    }
    (num / den).sqrt()
}

/// Naive scaled dot-product attention for one head, `[T, d]` row-major inputs.
pub fn attention_oracle(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    d: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; tq * d];
    for i in 0..tq {
        let scores: Vec<f64> = (0..tk)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..tk {
            for c in 0..d {
                out[i * d + c] += e[j] / z * v[j * d + c];
            }
        }
    }
    out
}

pub fn tone(freq: f32, amp: f32, len: usize, rate: u32) -> Waveform {
    Waveform::new(
        (0..len)
            .map(|i| amp * (std::f32::consts::TAU * freq * i as f32 / rate as f32).sin())
            .collect(),
        1,
        rate,
    )
    .unwrap()
}
