//! Optimisation loop shared by both stages: AdamW, EMA weights, crop
//! sampling and resumable checkpoints.

mod checkpoint;
mod optim;

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointKind, MAGIC, VERSION};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, Ema, EmaConfig};

use crate::dmae::{DmaeConfig, DmaeModel};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::signal::Waveform;
use crate::tcld::{TcldConfig, TcldModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Random,
    /// Chunk `index` of the consecutive non-overlapping tiling.
    Fixed(usize),
}

/// Number of crops of `crop` samples tiling `len` samples (the last one padded).
pub fn chunk_count(len: usize, crop: usize) -> usize {
    len.div_ceil(crop.max(1)).max(1)
}

/// Cuts `length` samples; sources shorter than the crop are zero-padded on the right.
pub fn crop(w: &Waveform, length: usize, mode: CropMode, rng: &mut impl Rng) -> Result<Waveform> {
    if length == 0 {
        return Err(Error::InvalidArgument(
            "crop length must be positive".into(),
        ));
    }
    let start = match mode {
        CropMode::Random if w.len() > length => rng.random_range(0..=w.len() - length),
        CropMode::Random => 0,
        CropMode::Fixed(k) => {
            let n = chunk_count(w.len(), length);
            if k >= n {
                return Err(Error::InvalidArgument(format!(
                    "chunk {k} of a {n}-chunk source"
                )));
            }
            k * length
        }
    };
    Ok(w.segment(start, length))
}

pub fn fixed_chunks(w: &Waveform, length: usize) -> Result<Vec<Waveform>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..chunk_count(w.len(), length))
        .map(|k| crop(w, length, CropMode::Fixed(k), &mut rng))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub ema: EmaConfig,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub crop_length: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn stage1_full() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            ema: EmaConfig::default(),
            grad_clip: 1.0,
            batch_size: 32,
            crop_length: 1 << 18,
            steps: 1_000_000,
            checkpoint_every: 10_000,
            seed: 0,
        }
    }

    pub fn stage2_full() -> Self {
        Self {
            crop_length: 1 << 21,
            ..Self::stage1_full()
        }
    }

    pub fn tiny() -> Self {
        Self {
            batch_size: 8,
            crop_length: 1 << 14,
            steps: 2000,
            checkpoint_every: 500,
            ..Self::stage1_full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let mut problems = Vec::new();
        if !(0.0..1.0).contains(&self.ema.beta) || !(self.ema.power > 0.0) {
            problems.push("ema.beta must lie in [0, 1) and ema.power be positive".to_string());
        }
        if !(self.grad_clip > 0.0) {
            problems.push("grad_clip must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if self.crop_length == 0 {
            problems.push("crop_length must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// A model the [`Trainer`] can optimise and persist.
pub trait Trainable: Sized + Clone {
    type Config: Clone + Serialize + DeserializeOwned;
    const KIND: CheckpointKind;

    fn build(config: &Self::Config, seed: u64) -> Result<Self>;
    fn model_config(&self) -> &Self::Config;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Trainable for DmaeModel {
    type Config = DmaeConfig;
    const KIND: CheckpointKind = CheckpointKind::Stage1;

    fn build(config: &DmaeConfig, seed: u64) -> Result<Self> {
        DmaeModel::build(config, seed)
    }
    fn model_config(&self) -> &DmaeConfig {
        self.config()
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Trainable for TcldModel {
    type Config = TcldConfig;
    const KIND: CheckpointKind = CheckpointKind::Stage2;

    fn build(config: &TcldConfig, seed: u64) -> Result<Self> {
        TcldModel::build(config, seed)
    }
    fn model_config(&self) -> &TcldConfig {
        self.config()
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f32,
    pub wall_ms: u64,
    /// Gradient norm before clipping, when the clip was active.
    pub clipped_from: Option<f64>,
}

impl LossRecord {
    /// `step<TAB>loss<TAB>wall_ms`, loss printed in shortest round-trip form.
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.loss, self.wall_ms)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainState {
    step: u64,
    rng_seed: String,
    rng_word_pos: String,
    rng_stream: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta<C> {
    model: C,
    train: TrainConfig,
    state: TrainState,
}

#[derive(Deserialize)]
struct ModelOnly<C> {
    model: C,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format(format!("bad rng seed `{s}`"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(e.to_string()))
}

pub fn from_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
}

/// Reads the model configuration stored in a checkpoint.
pub fn checkpoint_model_config<C: DeserializeOwned>(ckpt: &Checkpoint) -> Result<C> {
    let m: ModelOnly<C> = toml::from_str(&ckpt.config)
        .map_err(|e| Error::Format(format!("checkpoint config: {}", e.message())))?;
    Ok(m.model)
}

fn take_tensors(ckpt: &Checkpoint, prefix: &str, params: &ParamStore) -> Result<Vec<Tensor>> {
    params
        .iter()
        .map(|(_, p)| {
            let name = format!("{prefix}{}", p.name);
            let t = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing `{name}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            Ok(t.clone())
        })
        .collect()
}

/// Which weights to materialise from a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Raw,
    Ema,
}

/// Builds a model from a checkpoint of the matching kind.
pub fn load_model<M: Trainable>(ckpt: &Checkpoint, weights: Weights) -> Result<M> {
    ckpt.expect_kind(M::KIND)?;
    let config: M::Config = checkpoint_model_config(ckpt)?;
    let mut model = M::build(&config, 0)?;
    let prefix = match weights {
        Weights::Raw => "param.",
        Weights::Ema => "ema.",
    };
    let values = take_tensors(ckpt, prefix, model.params())?;
    for (p, v) in model.params_mut().iter_mut().zip(values) {
        p.value = v;
    }
    Ok(model)
}

/// Optimiser, EMA and rng around a model; every step is reproducible from the seed.
#[derive(Debug, Clone)]
pub struct Trainer<M: Trainable> {
    pub model: M,
    pub config: TrainConfig,
    optimizer: AdamW,
    ema: Ema,
    rng: ChaCha8Rng,
    pub log: Vec<LossRecord>,
}

impl<M: Trainable> Trainer<M> {
    /// Builds the model from `config.seed` and seeds the training stream from it.
    pub fn new(model_config: &M::Config, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = M::build(model_config, config.seed)?;
        Ok(Self::with_model(model, config))
    }

    pub fn with_model(model: M, config: TrainConfig) -> Self {
        let optimizer = AdamW::new(config.optimizer, model.params());
        let ema = Ema::new(config.ema, model.params());
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        Self {
            model,
            config,
            optimizer,
            ema,
            rng,
            log: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn losses(&self) -> Vec<f32> {
        self.log.iter().map(|r| r.loss).collect()
    }

    /// Runs `f` to populate gradients, then clips, updates and advances the EMA.
    pub fn step(
        &mut self,
        f: impl FnOnce(&mut M, &mut ChaCha8Rng) -> Result<f32>,
    ) -> Result<LossRecord> {
        let start = Instant::now();
        self.model.params_mut().zero_grad();
        let loss = f(&mut self.model, &mut self.rng)?;
        let params = self.model.params_mut();
        let clipped_from = clip_grad_norm(params, self.config.grad_clip);
        let step = self.optimizer.step_count() + 1;
        if let Some(norm) = clipped_from {
            log::info!(
                "step {step}: gradient norm {norm:.4} clipped to {}",
                self.config.grad_clip
            );
        }
        self.optimizer.step(params)?;
        self.ema.update(params, step);
        let record = LossRecord {
            step,
            loss,
            wall_ms: start.elapsed().as_millis() as u64,
            clipped_from,
        };
        self.log.push(record.clone());
        Ok(record)
    }

    /// A copy of the model carrying the EMA weights.
    pub fn ema_model(&self) -> M {
        let mut m = self.model.clone();
        self.ema.apply_to(m.params_mut());
        m
    }

    pub fn ema(&self) -> &Ema {
        &self.ema
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta {
            model: self.model.model_config().clone(),
            train: self.config.clone(),
            state: TrainState {
                step: self.step_count(),
                rng_seed: hex(&self.rng.get_seed()),
                rng_word_pos: self.rng.get_word_pos().to_string(),
                rng_stream: self.rng.get_stream().to_string(),
            },
        };
        let mut ckpt = Checkpoint::new(M::KIND, to_toml(&meta)?);
        let params = self.model.params();
        let (m, v) = self.optimizer.moments();
        for (prefix, tensors) in [
            (
                "param.",
                params
                    .iter()
                    .map(|(_, p)| p.value.clone())
                    .collect::<Vec<_>>(),
            ),
            ("adam.m.", m.to_vec()),
            ("adam.v.", v.to_vec()),
            ("ema.", self.ema.shadow().to_vec()),
            ("ema_residual.", self.ema.residual().to_vec()),
        ] {
            for ((_, p), t) in params.iter().zip(tensors) {
                ckpt.push(format!("{prefix}{}", p.name), t);
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Restores model, optimiser, EMA and rng so training continues exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(M::KIND)?;
        let meta: Meta<M::Config> = toml::from_str(&ckpt.config)
            .map_err(|e| Error::Format(format!("checkpoint config: {}", e.message())))?;
        let model: M = load_model(ckpt, Weights::Raw)?;
        let mut t = Self::with_model(model, meta.train);
        let params = t.model.params();
        let m = take_tensors(ckpt, "adam.m.", params)?;
        let v = take_tensors(ckpt, "adam.v.", params)?;
        let shadow = take_tensors(ckpt, "ema.", params)?;
        let residual = take_tensors(ckpt, "ema_residual.", params)?;
        t.optimizer.restore(meta.state.step, m, v, params)?;
        t.ema.restore(shadow, residual, params)?;
        let parse = |s: &str| -> Result<u128> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad rng counter `{s}`")))
        };
        let mut rng = ChaCha8Rng::from_seed(unhex32(&meta.state.rng_seed)?);
        rng.set_stream(parse(&meta.state.rng_stream)? as u64);
        rng.set_word_pos(parse(&meta.state.rng_word_pos)?);
        t.rng = rng;
        Ok(t)
    }

    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
