//! Waveforms, short-time Fourier transforms and WAV files.

mod stft;
pub mod wav;

pub use stft::{
    flatten_freq, hann_window, istft, stft, stft_complex, unflatten_freq, ComplexFrames,
    FreqMatrix, Spectrogram, StftConfig,
};

use num_traits::Float;

use crate::error::{Error, Result};

/// Multichannel audio stored channel-major: `samples[ch * len + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T = f32> {
    samples: Vec<T>,
    channels: usize,
    sample_rate: u32,
}

impl<T: Float> Waveform<T> {
    pub fn new(samples: Vec<T>, channels: usize, sample_rate: u32) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument(
                "waveform needs at least one channel".into(),
            ));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        if samples.is_empty() || !samples.len().is_multiple_of(channels) {
            return Err(Error::Shape(format!(
                "{} samples cannot form {channels} non-empty channels",
                samples.len()
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform contains NaN or infinity".into()));
        }
        Ok(Self {
            samples,
            channels,
            sample_rate,
        })
    }

    pub fn zeros(channels: usize, len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![T::zero(); channels * len], channels, sample_rate)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn channel(&self, ch: usize) -> &[T] {
        let n = self.len();
        &self.samples[ch * n..(ch + 1) * n]
    }

    /// Samples `[start, start + len)` of every channel; positions past the end read as zero.
    pub fn segment(&self, start: usize, len: usize) -> Self {
        let n = self.len();
        let mut out = vec![T::zero(); self.channels * len];
        for ch in 0..self.channels {
            let src = self.channel(ch);
            let end = n.min(start + len);
            if start < end {
                out[ch * len..ch * len + end - start].copy_from_slice(&src[start..end]);
            }
        }
        Self {
            samples: out,
            channels: self.channels,
            sample_rate: self.sample_rate,
        }
    }

    pub fn map<U: Float>(&self, f: impl Fn(T) -> U) -> Waveform<U> {
        Waveform {
            samples: self.samples.iter().map(|&s| f(s)).collect(),
            channels: self.channels,
            sample_rate: self.sample_rate,
        }
    }
}
