use std::sync::Arc;

use num_traits::Float;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop: 256,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 4 || !self.fft_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "fft size {} is not a power of two >= 4",
                self.fft_size
            )));
        }
        if self.hop == 0 || !self.fft_size.is_multiple_of(self.hop) {
            return Err(Error::InvalidArgument(format!(
                "hop {} does not divide fft size {}",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }

    /// Rows per channel; bin 0 packs DC (real part) with Nyquist (imaginary part).
    pub fn bins(&self) -> usize {
        self.fft_size / 2
    }

    pub fn frames(&self, len: usize) -> usize {
        len / self.hop
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window<T: Float>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            T::from(0.5 - 0.5 * x.cos()).expect("float")
        })
        .collect()
}

/// Complex STFT frames laid out `[channel][frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFrames<T> {
    pub data: Vec<Complex<T>>,
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
}

/// Magnitude and phase laid out `[channel][bin][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T = f32> {
    pub magnitude: Vec<T>,
    pub phase: Vec<T>,
    pub channels: usize,
    pub bins: usize,
    pub frames: usize,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl<T: Float> Spectrogram<T> {
    fn index(&self, ch: usize, bin: usize, frame: usize) -> usize {
        (ch * self.bins + bin) * self.frames + frame
    }

    pub fn magnitude_at(&self, ch: usize, bin: usize, frame: usize) -> T {
        self.magnitude[self.index(ch, bin, frame)]
    }
}

fn plan<T: FftNum>(n: usize, inverse: bool) -> Arc<dyn Fft<T>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    }
}

/// Windowed FFT of every frame, keeping `n/2` packed bins.
pub fn stft_complex<T: FftNum + Float>(
    w: &Waveform<T>,
    config: StftConfig,
) -> Result<ComplexFrames<T>> {
    config.validate()?;
    let (n, h) = (config.fft_size, config.hop);
    let len = w.len();
    if len < n {
        return Err(Error::InvalidArgument(format!(
            "waveform of {len} samples is shorter than the fft size {n}"
        )));
    }
    let frames = config.frames(len);
    let bins = config.bins();
    let window = hann_window::<T>(n);
    let fft = plan::<T>(n, false);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut data = Vec::with_capacity(w.channels() * frames * bins);
    for ch in 0..w.channels() {
        let x = w.channel(ch);
        for f in 0..frames {
            let start = f * h;
            for (i, b) in buf.iter_mut().enumerate() {
                let s = x.get(start + i).copied().unwrap_or_else(T::zero);
                *b = Complex::new(s * window[i], T::zero());
            }
            fft.process(&mut buf);
            data.push(Complex::new(buf[0].re, buf[n / 2].re));
            data.extend_from_slice(&buf[1..bins]);
        }
    }
    Ok(ComplexFrames {
        data,
        channels: w.channels(),
        frames,
        bins,
    })
}

pub fn stft<T: FftNum + Float>(w: &Waveform<T>, config: StftConfig) -> Result<Spectrogram<T>> {
    let cf = stft_complex(w, config)?;
    let (c, frames, bins) = (cf.channels, cf.frames, cf.bins);
    let mut magnitude = vec![T::zero(); c * bins * frames];
    let mut phase = vec![T::zero(); c * bins * frames];
    for ch in 0..c {
        for f in 0..frames {
            for b in 0..bins {
                let z = cf.data[(ch * frames + f) * bins + b];
                let i = (ch * bins + b) * frames + f;
                magnitude[i] = z.norm();
                phase[i] = z.arg();
            }
        }
    }
    Ok(Spectrogram {
        magnitude,
        phase,
        channels: c,
        bins,
        frames,
        config,
        sample_rate: w.sample_rate(),
    })
}

/// Weighted overlap-add inverse; output length is `frames * hop`.
pub fn istft<T: FftNum + Float>(s: &Spectrogram<T>) -> Result<Waveform<T>> {
    s.config.validate()?;
    let expected = s.channels * s.bins * s.frames;
    if s.magnitude.len() != expected || s.phase.len() != expected {
        return Err(Error::Shape(format!(
            "spectrogram magnitude {} / phase {} values, expected {expected}",
            s.magnitude.len(),
            s.phase.len()
        )));
    }
    if s.bins != s.config.bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, fft size {} needs {}",
            s.bins,
            s.config.fft_size,
            s.config.bins()
        )));
    }
    let (n, h) = (s.config.fft_size, s.config.hop);
    let len = s.frames * h;
    let window = hann_window::<T>(n);
    let ifft = plan::<T>(n, true);
    let scale = T::one() / T::from(n).expect("float");
    let mut norm = vec![T::zero(); len];
    for f in 0..s.frames {
        for (i, &w) in window.iter().enumerate() {
            if let Some(v) = norm.get_mut(f * h + i) {
                *v = *v + w * w;
            }
        }
    }
    let floor = T::from(1e-10).expect("float");
    let mut out = vec![T::zero(); s.channels * len];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    for ch in 0..s.channels {
        let dst = &mut out[ch * len..(ch + 1) * len];
        for f in 0..s.frames {
            let z = |b: usize| {
                Complex::from_polar(s.magnitude_at(ch, b, f), s.phase[s.index(ch, b, f)])
            };
            let packed = z(0);
            buf[0] = Complex::new(packed.re, T::zero());
            buf[n / 2] = Complex::new(packed.im, T::zero());
            for b in 1..s.bins {
                let v = z(b);
                buf[b] = v;
                buf[n - b] = v.conj();
            }
            ifft.process(&mut buf);
            for i in 0..n {
                if let Some(d) = dst.get_mut(f * h + i) {
                    *d = *d + buf[i].re * scale * window[i];
                }
            }
        }
        for (d, &w) in dst.iter_mut().zip(&norm) {
            *d = if w > floor { *d / w } else { T::zero() };
        }
    }
    Waveform::new(out, s.channels, s.sample_rate)
}

/// Magnitudes as a `[channels * bins, frames]` matrix, one row per (channel, frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct FreqMatrix<T = f32> {
    pub rows: usize,
    pub frames: usize,
    pub data: Vec<T>,
}

impl FreqMatrix<f32> {
    pub fn into_tensor(self) -> Tensor {
        Tensor::new(vec![1, self.rows, self.frames], self.data).expect("sized by construction")
    }
}

pub fn flatten_freq<T: Float>(s: &Spectrogram<T>) -> FreqMatrix<T> {
    FreqMatrix {
        rows: s.channels * s.bins,
        frames: s.frames,
        data: s.magnitude.clone(),
    }
}

/// Splits a flattened matrix back into `[channels][bins][frames]` magnitudes.
pub fn unflatten_freq<T: Float>(m: &FreqMatrix<T>, channels: usize) -> Result<Vec<T>> {
    if channels == 0 || !m.rows.is_multiple_of(channels) {
        return Err(Error::Shape(format!(
            "{} rows do not split into {channels} channels",
            m.rows
        )));
    }
    Ok(m.data.clone())
}
