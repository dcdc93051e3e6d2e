//! Diffusion magnitude-autoencoder.
//!
//! The encoder sees only the magnitude spectrogram (phase is discarded),
//! flattened to one channel per (audio channel, frequency), and squashes its
//! output with `tanh`. The decoder is a waveform-domain diffusion U-Net that
//! receives the latent through channel injection, so decoding also acts as a
//! vocoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, noise_batch, SamplerSchedule};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Downsample, Graph, ParamStore, Tensor, Var};
use crate::signal::{flatten_freq, stft, StftConfig, Waveform};
use crate::unet::{UNet, UNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmaeConfig {
    pub audio_channels: usize,
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub latent_channels: usize,
    /// Input values per latent value: `c·t / (latent_channels·L)`.
    pub compression: usize,
    pub encoder_channels: usize,
    /// Magnitudes enter the encoder as `ln(1 + scale·m)`.
    pub magnitude_scale: f32,
    pub decoder: UNetConfig,
}

impl DmaeConfig {
    pub fn full() -> Self {
        Self {
            audio_channels: 2,
            sample_rate: 48_000,
            stft: StftConfig::default(),
            latent_channels: 32,
            compression: 64,
            encoder_channels: 512,
            magnitude_scale: 1.0,
            decoder: UNetConfig::dmae_full(),
        }
    }

    pub fn tiny() -> Self {
        Self {
            audio_channels: 1,
            sample_rate: 8000,
            stft: StftConfig {
                fft_size: 256,
                hop: 64,
            },
            latent_channels: 8,
            compression: 16,
            encoder_channels: 32,
            magnitude_scale: 1.0,
            decoder: UNetConfig::dmae_tiny(),
        }
    }

    /// Frame reduction performed by the encoder's strided stages.
    pub fn frame_reduction(&self) -> Result<usize> {
        let num = self.compression * self.latent_channels;
        let den = self.audio_channels * self.stft.hop;
        if den == 0 || !num.is_multiple_of(den) || !(num / den).is_power_of_two() {
            return Err(Error::Config(format!(
                "compression {} with {} latent channels, {} audio channels and hop {} \
                 does not give a power-of-two frame reduction",
                self.compression, self.latent_channels, self.audio_channels, self.stft.hop
            )));
        }
        Ok(num / den)
    }

    /// Waveform samples per latent step.
    pub fn samples_per_latent(&self) -> Result<usize> {
        Ok(self.stft.hop * self.frame_reduction()?)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.decoder.validate()?;
        let mut problems = Vec::new();
        if self.audio_channels == 0 || self.latent_channels == 0 || self.encoder_channels == 0 {
            problems.push("channel counts must be positive".to_string());
        }
        if !(self.magnitude_scale > 0.0) {
            problems.push("magnitude_scale must be positive".to_string());
        }
        if self.decoder.in_channels != self.audio_channels {
            problems.push(format!(
                "decoder.in_channels {} != audio_channels {}",
                self.decoder.in_channels, self.audio_channels
            ));
        }
        if self.decoder.inject_channels != self.latent_channels {
            problems.push(format!(
                "decoder.inject_channels {} != latent_channels {}",
                self.decoder.inject_channels, self.latent_channels
            ));
        }
        match (self.samples_per_latent(), self.decoder.inject_depth) {
            (Err(e), _) => problems.push(e.to_string()),
            (Ok(_), None) => problems.push("decoder needs an inject_depth".to_string()),
            (Ok(spl), Some(d)) => {
                if spl % self.decoder.factor_at(d) != 0 {
                    problems.push(format!(
                        "inject depth {d} runs at 1/{} resolution, which is not a multiple \
                         of the latent rate 1/{spl}",
                        self.decoder.factor_at(d)
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Waveform lengths must be multiples of this.
    pub fn length_granularity(&self) -> Result<usize> {
        Ok(lcm(self.samples_per_latent()?, self.decoder.total_factor()))
    }

    /// Smallest valid waveform length `>= len`.
    pub fn padded_length(&self, len: usize) -> Result<usize> {
        let unit = self.length_granularity()?;
        Ok(len.max(self.stft.fft_size).div_ceil(unit) * unit)
    }

    /// Latent length for a waveform of `len` samples.
    pub fn latent_length(&self, len: usize) -> Result<usize> {
        let spl = self.samples_per_latent()?;
        let unit = self.length_granularity()?;
        if len < self.stft.fft_size || !len.is_multiple_of(unit) {
            return Err(Error::Shape(format!(
                "waveform length {len} must be a multiple of {unit} and at least {}",
                self.stft.fft_size
            )));
        }
        Ok(len / spl)
    }

    /// Waveform length produced from a latent of length `latent_len`.
    pub fn waveform_length(&self, latent_len: usize) -> Result<usize> {
        Ok(latent_len * self.samples_per_latent()?)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Encoder output: `[B, latent_channels, L]`, every value in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(Tensor);

impl Latent {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims3()?;
        if values.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "latent values must lie in [-1, 1]".into(),
            ));
        }
        Ok(Self(values))
    }

    /// Clamps into the bottleneck range.
    pub fn clamped(mut values: Tensor) -> Result<Self> {
        for v in values.data_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        Self::new(values)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    input: Conv1d,
    downs: Vec<Downsample>,
    output: Conv1d,
}

impl Encoder {
    fn forward(&self, g: &mut Graph, store: &ParamStore, mags: Var) -> Result<Var> {
        let mut h = self.input.forward(g, store, mags)?;
        h = g.silu(h);
        for d in &self.downs {
            h = d.forward(g, store, h)?;
            h = g.silu(h);
        }
        h = self.output.forward(g, store, h)?;
        Ok(g.tanh(h))
    }
}

#[derive(Debug, Clone)]
pub struct DmaeModel {
    config: DmaeConfig,
    encoder: Encoder,
    decoder: UNet,
    pub params: ParamStore,
}

impl DmaeModel {
    pub fn build(config: &DmaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let rows = config.audio_channels * config.stft.bins();
        let e = config.encoder_channels;
        let input = Conv1d::same(&mut params, "encoder.input", rows, e, 3, false, &mut rng)?;
        let stages = config.frame_reduction()?.trailing_zeros() as usize;
        let mut downs = Vec::with_capacity(stages);
        for i in 0..stages {
            downs.push(Downsample::new(
                &mut params,
                &format!("encoder.down{i}"),
                e,
                e,
                2,
                &mut rng,
            )?);
        }
        let output = Conv1d::same(
            &mut params,
            "encoder.output",
            e,
            config.latent_channels,
            1,
            false,
            &mut rng,
        )?;
        let decoder = UNet::build_into(&config.decoder, &mut params, "decoder.", &mut rng)?;
        Ok(Self {
            config: config.clone(),
            encoder: Encoder {
                input,
                downs,
                output,
            },
            decoder,
            params,
        })
    }

    pub fn config(&self) -> &DmaeConfig {
        &self.config
    }

    fn check_waveform(&self, w: &Waveform) -> Result<usize> {
        if w.channels() != self.config.audio_channels {
            return Err(Error::Shape(format!(
                "model expects {} audio channels, got {}",
                self.config.audio_channels,
                w.channels()
            )));
        }
        self.config.latent_length(w.len())
    }

    /// Encoder input for a batch: `ln(1 + scale·|STFT|)` as `[B, c·bins, frames]`.
    pub fn magnitude_features(&self, batch: &[Waveform]) -> Result<Tensor> {
        let mut items = Vec::with_capacity(batch.len());
        let mut len = None;
        for w in batch {
            self.check_waveform(w)?;
            if *len.get_or_insert(w.len()) != w.len() {
                return Err(Error::Shape("batch waveforms differ in length".into()));
            }
            let m = flatten_freq(&stft(w, self.config.stft)?);
            let scale = self.config.magnitude_scale;
            let mut t = m.into_tensor();
            for v in t.data_mut() {
                *v = (scale * *v).ln_1p();
            }
            items.push(t);
        }
        Tensor::stack_batch(&items)
    }

    fn encode_var(&self, g: &mut Graph, batch: &[Waveform]) -> Result<Var> {
        let feats = self.magnitude_features(batch)?;
        let x = g.constant(feats);
        self.encoder.forward(g, &self.params, x)
    }

    pub fn encode_batch(&self, batch: &[Waveform]) -> Result<Latent> {
        let mut g = Graph::inference();
        let z = self.encode_var(&mut g, batch)?;
        Latent::new(g.value(z).clone())
    }

    pub fn encode(&self, w: &Waveform) -> Result<Latent> {
        self.encode_batch(std::slice::from_ref(w))
    }

    /// Velocity prediction of the decoder U-Net for `[B, c, t]` inputs.
    pub fn decoder_velocity(&self, x: &Tensor, sigmas: &[f32], z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let zv = g.constant(z.clone());
        let out = self
            .decoder
            .forward(&mut g, &self.params, xv, sigmas, Some(zv), None)?;
        Ok(g.value(out).clone())
    }

    /// Shape `[B, c, t]` of the waveform batch decoded from latent `z`.
    pub fn waveform_shape(&self, z: &Tensor) -> Result<[usize; 3]> {
        let (b, c, l) = z.dims3()?;
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, model expects {}",
                self.config.latent_channels
            )));
        }
        Ok([
            b,
            self.config.audio_channels,
            self.config.waveform_length(l)?,
        ])
    }

    /// DDIM decoding of `z` starting from `noise` (`[B, c, t]`).
    pub fn decode(&self, z: &Tensor, noise: &Tensor, steps: usize) -> Result<Tensor> {
        let shape = self.waveform_shape(z)?;
        if noise.shape() != shape {
            return Err(Error::Shape(format!(
                "decode noise {:?} does not match the latent's waveform shape {shape:?}",
                noise.shape()
            )));
        }
        let schedule = SamplerSchedule::linear(steps)?;
        let model = |x: &[f32], sigma: f64| {
            let xt = Tensor::new(shape.to_vec(), x.to_vec())?;
            let v = self.decoder_velocity(&xt, &vec![sigma as f32; shape[0]], z)?;
            Ok(v.into_data())
        };
        let out = diffusion::sample(&model, noise.data(), &schedule)?;
        Tensor::new(shape.to_vec(), out)
    }

    /// One stage-1 training step: populates gradients of encoder and decoder
    /// jointly and returns the v-loss.
    pub fn train_step(&mut self, batch: &[Waveform], rng: &mut ChaCha8Rng) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let x0 = waveforms_to_tensor(batch)?;
        let mut g = Graph::new();
        let z = self.encode_var(&mut g, batch)?;
        let nb = noise_batch(&x0, rng)?;
        let noisy = g.constant(nb.noisy);
        let target = g.constant(nb.target);
        let pred = self
            .decoder
            .forward(&mut g, &self.params, noisy, &nb.sigmas, Some(z), None)?;
        let loss = g.mse(pred, target)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("stage-1 loss is {value}")));
        }
        g.backward_into(loss, &mut self.params)?;
        Ok(value)
    }
}

/// Stacks equal-shaped waveforms into `[B, c, t]`.
pub fn waveforms_to_tensor(batch: &[Waveform]) -> Result<Tensor> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Shape("empty waveform batch".into()))?;
    let (c, t) = (first.channels(), first.len());
    let mut data = Vec::with_capacity(batch.len() * c * t);
    for w in batch {
        if w.channels() != c || w.len() != t {
            return Err(Error::Shape("batch waveforms differ in shape".into()));
        }
        data.extend_from_slice(w.samples());
    }
    Tensor::new(vec![batch.len(), c, t], data)
}

/// Splits `[B, c, t]` into individual waveforms.
pub fn tensor_to_waveforms(t: &Tensor, sample_rate: u32) -> Result<Vec<Waveform>> {
    let (b, c, _) = t.dims3()?;
    (0..b)
        .map(|i| Waveform::new(t.batch_item(i)?.into_data(), c, sample_rate))
        .collect()
}
