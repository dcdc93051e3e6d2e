//! Recursive 1D U-Net built from resnet (R), modulation (M), inject (I),
//! attention (A) and cross-attention (C) items.
//!
//! Depth `d` runs at `channels[d]` and at the input resolution divided by
//! `factors[0] * … * factors[d]`. Each depth downsamples its input, applies
//! `item_repeats[d]` items, recurses into depth `d + 1`, merges the skip by
//! channel concatenation and a 1×1 projection, applies the same number of
//! items again and upsamples back.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Conv1d, CrossAttention, Downsample, Graph, GroupNorm, Modulation, NoiseEmbedding, ParamStore,
    SelfAttention, Tensor, Upsample, Var,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub factors: Vec<usize>,
    pub item_repeats: Vec<usize>,
    pub use_attention: Vec<bool>,
    pub use_cross_attention: Vec<bool>,
    pub inject_depth: Option<usize>,
    pub inject_channels: usize,
    pub attention_heads: usize,
    pub attention_head_features: usize,
    pub context_features: usize,
    pub modulation_features: usize,
}

impl UNetConfig {
    /// Waveform decoder of the full-scale autoencoder.
    pub fn dmae_full() -> Self {
        Self {
            in_channels: 2,
            channels: vec![256, 512, 512, 512, 1024, 1024, 1024],
            factors: vec![1, 2, 2, 2, 2, 2, 2],
            item_repeats: vec![1, 2, 2, 2, 2, 2, 2],
            use_attention: vec![false; 7],
            use_cross_attention: vec![false; 7],
            inject_depth: Some(4),
            inject_channels: 32,
            attention_heads: 12,
            attention_head_features: 64,
            context_features: 0,
            modulation_features: 256,
        }
    }

    /// Latent generator of the full-scale text-conditioned model.
    pub fn tcld_full() -> Self {
        Self {
            in_channels: 32,
            channels: vec![128, 256, 512, 512, 1024, 1024],
            factors: vec![1, 2, 2, 2, 2, 2],
            item_repeats: vec![2, 2, 2, 4, 8, 8],
            use_attention: vec![false, false, true, true, true, true],
            use_cross_attention: vec![true; 6],
            inject_depth: None,
            inject_channels: 0,
            attention_heads: 12,
            attention_head_features: 64,
            context_features: 768,
            modulation_features: 256,
        }
    }

    pub fn dmae_tiny() -> Self {
        Self {
            in_channels: 1,
            channels: vec![32, 32, 64, 64, 64, 64, 64],
            factors: vec![1, 2, 2, 2, 2, 2, 2],
            item_repeats: vec![1; 7],
            use_attention: vec![false, false, false, false, false, false, true],
            use_cross_attention: vec![false; 7],
            inject_depth: Some(3),
            inject_channels: 8,
            attention_heads: 2,
            attention_head_features: 16,
            context_features: 0,
            modulation_features: 32,
        }
    }

    pub fn tcld_tiny() -> Self {
        Self {
            in_channels: 8,
            channels: vec![32, 64],
            factors: vec![1, 2],
            item_repeats: vec![1, 1],
            use_attention: vec![false, true],
            use_cross_attention: vec![true, true],
            inject_depth: None,
            inject_channels: 0,
            attention_heads: 2,
            attention_head_features: 16,
            context_features: 32,
            modulation_features: 32,
        }
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    /// Product of all resampling factors; inputs must have a length divisible by it.
    pub fn total_factor(&self) -> usize {
        self.factors.iter().product()
    }

    /// Divisor of the input length at depth `d`.
    pub fn factor_at(&self, depth: usize) -> usize {
        self.factors[..=depth].iter().product()
    }

    pub fn has_cross_attention(&self) -> bool {
        self.use_cross_attention.iter().any(|&c| c)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 {
            return Err(Error::Config("unet needs at least one depth".into()));
        }
        let lists = [
            ("factors", self.factors.len()),
            ("item_repeats", self.item_repeats.len()),
            ("use_attention", self.use_attention.len()),
            ("use_cross_attention", self.use_cross_attention.len()),
        ];
        let bad: Vec<String> = lists
            .iter()
            .filter(|(_, len)| *len != n)
            .map(|(name, len)| format!("{name} has {len} entries, channels has {n}"))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Config(bad.join("; ")));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.factors.contains(&0) {
            return Err(Error::Config("resampling factors must be >= 1".into()));
        }
        match self.inject_depth {
            Some(d) if d >= n => {
                return Err(Error::Config(format!(
                    "inject_depth {d} is outside the {n} depths"
                )))
            }
            Some(_) if self.inject_channels == 0 => {
                return Err(Error::Config(
                    "inject_depth set without inject_channels".into(),
                ))
            }
            _ => {}
        }
        let attends = self
            .use_attention
            .iter()
            .chain(&self.use_cross_attention)
            .any(|&a| a);
        if attends && (self.attention_heads == 0 || self.attention_head_features == 0) {
            return Err(Error::Config(
                "attention needs heads and head features".into(),
            ));
        }
        if self.has_cross_attention() && self.context_features == 0 {
            return Err(Error::Config(
                "cross-attention needs context_features".into(),
            ));
        }
        if self.modulation_features == 0 {
            return Err(Error::Config("modulation_features must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResnetItem {
    conv1: Conv1d,
    norm: GroupNorm,
    conv2: Conv1d,
}

#[derive(Debug, Clone)]
struct Item {
    resnet: ResnetItem,
    modulation: Modulation,
    inject: Option<Conv1d>,
    attention: Option<(GroupNorm, SelfAttention)>,
    cross: Option<(GroupNorm, CrossAttention)>,
}

#[derive(Debug, Clone)]
struct Block {
    down: Downsample,
    down_items: Vec<Item>,
    merge: Conv1d,
    up_items: Vec<Item>,
    up: Upsample,
}

/// Conditioning context for cross-attention: `[B, T, F]` plus a `B·T` validity mask.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub tokens: Var,
    pub mask: &'a [bool],
}

/// Layer layout of a U-Net whose parameters live in an external [`ParamStore`].
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    noise_embedding: NoiseEmbedding,
    blocks: Vec<Block>,
}

impl UNet {
    /// Registers every parameter under `prefix` and initialises it from `rng`.
    pub fn build_into(
        config: &UNetConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let f = config.modulation_features;
        let noise_embedding = NoiseEmbedding::new(store, &format!("{prefix}noise"), f, rng)?;
        let mut blocks = Vec::with_capacity(config.depth());
        for d in 0..config.depth() {
            let ch = config.channels[d];
            let prev = if d == 0 {
                config.in_channels
            } else {
                config.channels[d - 1]
            };
            let p = format!("{prefix}depth{d}");
            let down = Downsample::new(
                store,
                &format!("{p}.down"),
                prev,
                ch,
                config.factors[d],
                rng,
            )?;
            let mut down_items = Vec::new();
            for r in 0..config.item_repeats[d] {
                down_items.push(Self::item(
                    config,
                    store,
                    &format!("{p}.down_items.{r}"),
                    d,
                    false,
                    rng,
                )?);
            }
            let merge = Conv1d::same(store, &format!("{p}.merge"), 2 * ch, ch, 1, false, rng)?;
            let mut up_items = Vec::new();
            for r in 0..config.item_repeats[d] {
                let inject = r == 0 && config.inject_depth == Some(d);
                up_items.push(Self::item(
                    config,
                    store,
                    &format!("{p}.up_items.{r}"),
                    d,
                    inject,
                    rng,
                )?);
            }
            let up = Upsample::new(store, &format!("{p}.up"), ch, prev, config.factors[d], rng)?;
            blocks.push(Block {
                down,
                down_items,
                merge,
                up_items,
                up,
            });
        }
        Ok(Self {
            config: config.clone(),
            noise_embedding,
            blocks,
        })
    }

    fn item(
        config: &UNetConfig,
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        inject: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Item> {
        let ch = config.channels[depth];
        let (heads, hf) = (config.attention_heads, config.attention_head_features);
        let resnet = ResnetItem {
            conv1: Conv1d::same(
                store,
                &format!("{name}.resnet.conv1"),
                ch,
                ch,
                3,
                false,
                rng,
            )?,
            norm: GroupNorm::new(store, &format!("{name}.resnet.norm"), ch, rng)?,
            conv2: Conv1d::same(store, &format!("{name}.resnet.conv2"), ch, ch, 3, true, rng)?,
        };
        let modulation = Modulation::new(
            store,
            &format!("{name}.modulation"),
            config.modulation_features,
            ch,
            rng,
        )?;
        let inject = if inject {
            Some(Conv1d::same(
                store,
                &format!("{name}.inject"),
                ch + config.inject_channels,
                ch,
                1,
                false,
                rng,
            )?)
        } else {
            None
        };
        let attention = if config.use_attention[depth] {
            Some((
                GroupNorm::new(store, &format!("{name}.attention.norm"), ch, rng)?,
                SelfAttention::new(
                    store,
                    &format!("{name}.attention"),
                    ch,
                    heads,
                    hf,
                    true,
                    rng,
                )?,
            ))
        } else {
            None
        };
        let cross = if config.use_cross_attention[depth] {
            Some((
                GroupNorm::new(store, &format!("{name}.cross_attention.norm"), ch, rng)?,
                CrossAttention::new(
                    store,
                    &format!("{name}.cross_attention"),
                    ch,
                    config.context_features,
                    heads,
                    hf,
                    true,
                    rng,
                )?,
            ))
        } else {
            None
        };
        Ok(Item {
            resnet,
            modulation,
            inject,
            attention,
            cross,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Predicts a tensor shaped like `x` (`[B, in_channels, L]`).
    ///
    /// `sigmas` holds one noise level per batch element. `inject` (`[B, I, Lz]`)
    /// is repeated in time to the resolution of the inject depth.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        sigmas: &[f32],
        inject: Option<Var>,
        context: Option<Context<'_>>,
    ) -> Result<Var> {
        let (b, c, len) = g.value(x).dims3()?;
        let cfg = &self.config;
        if c != cfg.in_channels {
            return Err(Error::Shape(format!(
                "unet expects {} input channels, got {c}",
                cfg.in_channels
            )));
        }
        if len % cfg.total_factor() != 0 {
            return Err(Error::Shape(format!(
                "input length {len} is not divisible by the total resampling factor {}",
                cfg.total_factor()
            )));
        }
        if sigmas.len() != b {
            return Err(Error::Shape(format!(
                "{} noise levels for a batch of {b}",
                sigmas.len()
            )));
        }
        match (cfg.inject_depth, inject) {
            (Some(_), None) => return Err(Error::Shape("model requires an inject tensor".into())),
            (None, Some(_)) => return Err(Error::Shape("model has no inject depth".into())),
            _ => {}
        }
        match (cfg.has_cross_attention(), context) {
            (true, None) => return Err(Error::Shape("model requires a text context".into())),
            (false, Some(_)) => return Err(Error::Shape("model has no cross-attention".into())),
            _ => {}
        }
        let inject = match (cfg.inject_depth, inject) {
            (Some(d), Some(z)) => Some(self.resample_inject(g, z, b, len / cfg.factor_at(d))?),
            _ => None,
        };
        if let Some(ctx) = context {
            let (cb, tokens, feats) = g.value(ctx.tokens).dims3()?;
            if cb != b || feats != cfg.context_features {
                return Err(Error::Shape(format!(
                    "context {:?}, expected [{b}, T, {}]",
                    [cb, tokens, feats],
                    cfg.context_features
                )));
            }
        }
        let features = self.noise_embedding.forward(g, store, sigmas)?;
        let env = Env {
            store,
            features,
            inject,
            context,
        };
        self.block(g, &env, 0, x)
    }

    fn resample_inject(&self, g: &mut Graph, z: Var, batch: usize, target: usize) -> Result<Var> {
        let (zb, zc, zl) = g.value(z).dims3()?;
        if zb != batch || zc != self.config.inject_channels {
            return Err(Error::Shape(format!(
                "inject tensor [{zb}, {zc}, {zl}], expected [{batch}, {}, L]",
                self.config.inject_channels
            )));
        }
        if zl == 0 || !target.is_multiple_of(zl) {
            return Err(Error::Shape(format!(
                "inject length {zl} does not divide the inject-depth length {target}"
            )));
        }
        g.repeat_time(z, target / zl)
    }

    fn block(&self, g: &mut Graph, env: &Env<'_>, d: usize, x: Var) -> Result<Var> {
        let block = &self.blocks[d];
        let mut h = block.down.forward(g, env.store, x)?;
        for item in &block.down_items {
            h = item.forward(g, env, h)?;
        }
        let skip = h;
        if d + 1 < self.blocks.len() {
            h = self.block(g, env, d + 1, h)?;
        }
        let cat = g.concat(&[h, skip], 1)?;
        h = block.merge.forward(g, env.store, cat)?;
        for item in &block.up_items {
            h = item.forward(g, env, h)?;
        }
        block.up.forward(g, env.store, h)
    }

    /// Exact number of scalar parameters registered by this layout.
    pub fn num_params(&self) -> usize {
        let items = |v: &[Item]| v.iter().map(Item::num_params).sum::<usize>();
        self.noise_embedding.num_params()
            + self
                .blocks
                .iter()
                .map(|b| {
                    b.down.num_params()
                        + items(&b.down_items)
                        + b.merge.num_params()
                        + items(&b.up_items)
                        + b.up.num_params()
                })
                .sum::<usize>()
    }
}

struct Env<'a> {
    store: &'a ParamStore,
    features: Var,
    inject: Option<Var>,
    context: Option<Context<'a>>,
}

impl Item {
    fn forward(&self, g: &mut Graph, env: &Env<'_>, x: Var) -> Result<Var> {
        let s = env.store;
        let r = &self.resnet;
        let mut h = r.conv1.forward(g, s, x)?;
        h = r.norm.forward(g, s, h)?;
        h = g.silu(h);
        h = r.conv2.forward(g, s, h)?;
        h = g.add(x, h)?;
        h = self.modulation.forward(g, s, h, env.features)?;
        if let (Some(proj), Some(z)) = (&self.inject, env.inject) {
            let cat = g.concat(&[h, z], 1)?;
            h = proj.forward(g, s, cat)?;
        }
        if let Some((norm, attn)) = &self.attention {
            let n = norm.forward(g, s, h)?;
            let t = g.transpose12(n)?;
            let a = attn.forward(g, s, t)?;
            let a = g.transpose12(a)?;
            h = g.add(h, a)?;
        }
        if let (Some((norm, attn)), Some(ctx)) = (&self.cross, env.context) {
            let n = norm.forward(g, s, h)?;
            let t = g.transpose12(n)?;
            let a = attn.forward(g, s, t, ctx.tokens, ctx.mask)?;
            let a = g.transpose12(a)?;
            h = g.add(h, a)?;
        }
        Ok(h)
    }

    fn num_params(&self) -> usize {
        self.resnet.conv1.num_params()
            + self.resnet.norm.num_params()
            + self.resnet.conv2.num_params()
            + self.modulation.num_params()
            + self.inject.as_ref().map_or(0, Conv1d::num_params)
            + self
                .attention
                .as_ref()
                .map_or(0, |(n, a)| n.num_params() + a.num_params())
            + self
                .cross
                .as_ref()
                .map_or(0, |(n, a)| n.num_params() + a.num_params())
    }
}

/// A U-Net together with its own parameters.
#[derive(Debug, Clone)]
pub struct UNetModel {
    pub net: UNet,
    pub params: ParamStore,
}

impl UNetModel {
    /// Deterministic construction: the same config and seed give identical parameters.
    pub fn build(config: &UNetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = UNet::build_into(config, &mut params, "", &mut rng)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &UNetConfig {
        self.net.config()
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Gradient-free forward pass on plain tensors.
    pub fn predict(
        &self,
        x: &Tensor,
        sigmas: &[f32],
        inject: Option<&Tensor>,
        context: Option<(&Tensor, &[bool])>,
    ) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let zv = inject.map(|z| g.constant(z.clone()));
        let ctx = context.map(|(t, m)| (g.constant(t.clone()), m));
        let out = self.net.forward(
            &mut g,
            &self.params,
            xv,
            sigmas,
            zv,
            ctx.map(|(tokens, mask)| Context { tokens, mask }),
        )?;
        Ok(g.value(out).clone())
    }
}
