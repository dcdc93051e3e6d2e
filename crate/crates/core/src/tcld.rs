//! Text-conditioned latent diffusion and the two-stage generation stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, gaussian, noise_batch, SamplerSchedule};
use crate::dmae::DmaeModel;
use crate::error::{Error, Result};
use crate::nn::layers::{init_tensor, Init};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::unet::{Context, UNet, UNetConfig};

pub const DEFAULT_CFG_SCALE: f32 = 3.0;
pub const DEFAULT_CFG_DROP: f64 = 0.1;

/// Token vectors `[T, d]` with a validity mask.
///
/// A null embedding stands for "no prompt"; models replace it with their
/// learned null row.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    vectors: Tensor,
    mask: Vec<bool>,
    is_null: bool,
}

impl TextEmbedding {
    pub fn new(vectors: Tensor, mask: Vec<bool>) -> Result<Self> {
        match vectors.shape() {
            [t, d] if *t >= 1 && *d >= 1 && *t == mask.len() => {}
            s => {
                return Err(Error::Shape(format!(
                    "text embedding {s:?} with a mask of {}; need [T >= 1, d >= 1]",
                    mask.len()
                )))
            }
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite(
                "text embedding has non-finite entries".into(),
            ));
        }
        Ok(Self {
            vectors,
            mask,
            is_null: false,
        })
    }

    pub fn null(features: usize) -> Self {
        Self {
            vectors: Tensor::zeros(vec![1, features]),
            mask: vec![true],
            is_null: true,
        }
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }

    pub fn tokens(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// A frozen prompt encoder.
pub trait TextEmbedder {
    fn features(&self) -> usize;
    fn embed(&self, prompt: &str) -> Result<TextEmbedding>;
}

/// Byte-level lookup table drawn once from a seed.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    table: Tensor,
}

impl ToyEmbedder {
    pub fn new(features: usize, seed: u64) -> Result<Self> {
        if features == 0 {
            return Err(Error::InvalidArgument(
                "embedding width must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            table: gaussian(&[256, features], &mut rng),
        })
    }
}

impl TextEmbedder for ToyEmbedder {
    fn features(&self) -> usize {
        self.table.shape()[1]
    }

    fn embed(&self, prompt: &str) -> Result<TextEmbedding> {
        let d = self.features();
        if prompt.is_empty() {
            return Ok(TextEmbedding::null(d));
        }
        let mut data = Vec::with_capacity(prompt.len() * d);
        for &b in prompt.as_bytes() {
            let row = b as usize * d;
            data.extend_from_slice(&self.table.data()[row..row + d]);
        }
        TextEmbedding::new(
            Tensor::new(vec![prompt.len(), d], data)?,
            vec![true; prompt.len()],
        )
    }
}

pub fn toy_embed(prompt: &str, features: usize, seed: u64) -> Result<TextEmbedding> {
    ToyEmbedder::new(features, seed)?.embed(prompt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcldConfig {
    pub generator: UNetConfig,
    pub latent_length: usize,
    pub cfg_scale: f32,
    pub cfg_drop_prob: f64,
    pub clamp_latent: bool,
    pub embedder_seed: u64,
}

impl TcldConfig {
    /// Latents of 2^21-sample crops of the full-scale autoencoder.
    pub fn full() -> Self {
        Self {
            generator: UNetConfig::tcld_full(),
            latent_length: 1 << 21 >> 10,
            cfg_scale: DEFAULT_CFG_SCALE,
            cfg_drop_prob: DEFAULT_CFG_DROP,
            clamp_latent: true,
            embedder_seed: 0,
        }
    }

    /// Latents of 2^14-sample crops of the tiny autoencoder.
    pub fn tiny() -> Self {
        Self {
            generator: UNetConfig::tcld_tiny(),
            latent_length: 1 << 14 >> 7,
            cfg_scale: DEFAULT_CFG_SCALE,
            cfg_drop_prob: DEFAULT_CFG_DROP,
            clamp_latent: true,
            embedder_seed: 0,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.generator.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let mut problems = Vec::new();
        if !self.generator.has_cross_attention() {
            problems.push("generator needs at least one cross-attention depth".to_string());
        }
        if self.generator.inject_depth.is_some() {
            problems.push("generator must not have an inject depth".to_string());
        }
        if self.latent_length == 0
            || !self
                .latent_length
                .is_multiple_of(self.generator.total_factor())
        {
            problems.push(format!(
                "latent_length {} must be a positive multiple of {}",
                self.latent_length,
                self.generator.total_factor()
            ));
        }
        if !(self.cfg_scale >= 0.0) {
            problems.push("cfg_scale must be >= 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            problems.push("cfg_drop_prob must lie in [0, 1]".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TcldModel {
    config: TcldConfig,
    generator: UNet,
    null_row: ParamId,
    pub params: ParamStore,
}

impl TcldModel {
    pub fn build(config: &TcldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let generator = UNet::build_into(&config.generator, &mut params, "generator.", &mut rng)?;
        let d = config.generator.context_features;
        let null_row = params.add(
            "null_embedding",
            init_tensor(&[d], Init::FanIn(1), &mut rng),
        )?;
        Ok(Self {
            config: config.clone(),
            generator,
            null_row,
            params,
        })
    }

    pub fn config(&self) -> &TcldConfig {
        &self.config
    }

    pub fn set_cfg_drop_prob(&mut self, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "drop probability {p} outside [0, 1]"
            )));
        }
        self.config.cfg_drop_prob = p;
        Ok(())
    }

    pub fn embedder(&self) -> Result<ToyEmbedder> {
        ToyEmbedder::new(
            self.config.generator.context_features,
            self.config.embedder_seed,
        )
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 3] {
        [
            batch,
            self.config.latent_channels(),
            self.config.latent_length,
        ]
    }

    /// Builds the `[B, T, d]` context; dropped or null elements use the
    /// learned null row followed by masked padding.
    fn context(
        &self,
        g: &mut Graph,
        embeddings: &[&TextEmbedding],
        dropped: &[bool],
    ) -> Result<(Var, Vec<bool>)> {
        let d = self.config.generator.context_features;
        let use_null = |i: usize| dropped[i] || embeddings[i].is_null();
        let mut tokens = 1;
        for (i, e) in embeddings.iter().enumerate() {
            if e.features() != d {
                return Err(Error::Shape(format!(
                    "text embedding width {}, model expects {d}",
                    e.features()
                )));
            }
            if !use_null(i) {
                tokens = tokens.max(e.tokens());
            }
        }
        let mut parts = Vec::with_capacity(embeddings.len());
        let mut mask = Vec::with_capacity(embeddings.len() * tokens);
        for (i, e) in embeddings.iter().enumerate() {
            if use_null(i) {
                let row = g.param(&self.params, self.null_row);
                let row = g.reshape(row, &[1, 1, d])?;
                let part = if tokens > 1 {
                    let pad = g.constant(Tensor::zeros(vec![1, tokens - 1, d]));
                    g.concat(&[row, pad], 1)?
                } else {
                    row
                };
                parts.push(part);
                mask.push(true);
                mask.extend(std::iter::repeat_n(false, tokens - 1));
            } else {
                let t = e.tokens();
                let mut data = e.vectors().data().to_vec();
                data.resize(tokens * d, 0.0);
                parts.push(g.constant(Tensor::new(vec![1, tokens, d], data)?));
                mask.extend_from_slice(e.mask());
                mask.extend(std::iter::repeat_n(false, tokens - t));
            }
        }
        let ctx = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)?
        };
        Ok((ctx, mask))
    }

    fn velocity(&self, x: &Tensor, sigma: f64, e: &TextEmbedding, null: bool) -> Result<Tensor> {
        let (b, _, _) = x.dims3()?;
        let mut g = Graph::inference();
        let embeddings = vec![e; b];
        let (tokens, mask) = self.context(&mut g, &embeddings, &vec![null; b])?;
        let xv = g.constant(x.clone());
        let out = self.generator.forward(
            &mut g,
            &self.params,
            xv,
            &vec![sigma as f32; b],
            None,
            Some(Context {
                tokens,
                mask: &mask,
            }),
        )?;
        Ok(g.value(out).clone())
    }

    pub fn velocity_cond(&self, x: &Tensor, sigma: f64, e: &TextEmbedding) -> Result<Tensor> {
        self.velocity(x, sigma, e, false)
    }

    pub fn velocity_uncond(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let null = TextEmbedding::null(self.config.generator.context_features);
        self.velocity(x, sigma, &null, true)
    }

    /// Guided velocity `v_u + scale·(v_c − v_u)`.
    pub fn cfg_denoise(
        &self,
        x: &Tensor,
        sigma: f64,
        e: &TextEmbedding,
        scale: f32,
    ) -> Result<Tensor> {
        if !(scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale {scale} must be >= 0"
            )));
        }
        let cond = self.velocity_cond(x, sigma, e)?;
        if scale == 1.0 {
            return Ok(cond);
        }
        let mut out = self.velocity_uncond(x, sigma)?;
        for (u, c) in out.data_mut().iter_mut().zip(cond.data()) {
            *u += scale * (c - *u);
        }
        Ok(out)
    }

    /// DDIM sampling of a latent batch shaped like `noise`.
    pub fn generate_latent(
        &self,
        e: &TextEmbedding,
        noise: &Tensor,
        steps: usize,
        scale: f32,
    ) -> Result<Tensor> {
        let (b, c, l) = noise.dims3()?;
        if c != self.config.latent_channels() {
            return Err(Error::Shape(format!(
                "latent noise has {c} channels, generator expects {}",
                self.config.latent_channels()
            )));
        }
        let schedule = SamplerSchedule::linear(steps)?;
        let shape = vec![b, c, l];
        let model = |x: &[f32], sigma: f64| {
            let xt = Tensor::new(shape.clone(), x.to_vec())?;
            Ok(self.cfg_denoise(&xt, sigma, e, scale)?.into_data())
        };
        let out = diffusion::sample(&model, noise.data(), &schedule)?;
        Tensor::new(shape.clone(), out)
    }

    /// Per-element flags replacing the text condition by the null row.
    pub fn drop_mask(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
        let p = self.config.cfg_drop_prob;
        (0..batch).map(|_| rng.random::<f64>() < p).collect()
    }

    /// One stage-2 training step on `(latent [C, L] or [1, C, L], embedding)` pairs.
    pub fn train_step(
        &mut self,
        batch: &[(&Tensor, &TextEmbedding)],
        rng: &mut ChaCha8Rng,
    ) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let c = self.config.latent_channels();
        let mut items = Vec::with_capacity(batch.len());
        for (z, _) in batch {
            let l = *z.shape().last().unwrap_or(&0);
            items.push((*z).clone().reshape(vec![1, c, l])?);
        }
        let x0 = Tensor::stack_batch(&items)?;
        let dropped = self.drop_mask(batch.len(), rng);
        let nb = noise_batch(&x0, rng)?;
        let mut g = Graph::new();
        let embeddings: Vec<&TextEmbedding> = batch.iter().map(|(_, e)| *e).collect();
        let (tokens, mask) = self.context(&mut g, &embeddings, &dropped)?;
        let noisy = g.constant(nb.noisy);
        let target = g.constant(nb.target);
        let pred = self.generator.forward(
            &mut g,
            &self.params,
            noisy,
            &nb.sigmas,
            None,
            Some(Context {
                tokens,
                mask: &mask,
            }),
        )?;
        let loss = g.mse(pred, target)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("stage-2 loss is {value}")));
        }
        g.backward_into(loss, &mut self.params)?;
        Ok(value)
    }
}

/// Noise for both stages drawn from one seeded stream: latent noise first,
/// then waveform noise.
pub fn generation_noise(tcld: &TcldModel, dmae: &DmaeModel, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent_shape = tcld.latent_shape(1);
    let latent = gaussian(&latent_shape, &mut rng);
    let wave_shape = dmae.waveform_shape(&latent)?;
    let wave = gaussian(&wave_shape, &mut rng);
    Ok((latent, wave))
}

/// Full text-to-waveform stack: generate a latent, optionally clamp it, decode it.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    tcld: &TcldModel,
    dmae: &DmaeModel,
    e: &TextEmbedding,
    latent_noise: &Tensor,
    wave_noise: &Tensor,
    gen_steps: usize,
    dec_steps: usize,
    scale: f32,
) -> Result<Tensor> {
    if tcld.config().latent_channels() != dmae.config().latent_channels {
        return Err(Error::Shape(format!(
            "generator produces {}-channel latents, autoencoder expects {}",
            tcld.config().latent_channels(),
            dmae.config().latent_channels
        )));
    }
    let mut z = tcld.generate_latent(e, latent_noise, gen_steps, scale)?;
    if tcld.config().clamp_latent {
        for v in z.data_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
    }
    dmae.decode(&z, wave_noise, dec_steps)
}
