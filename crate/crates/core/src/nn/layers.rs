//! Parameterised building blocks: each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and records its forward pass on a [`Graph`].

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// How a freshly created weight is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

pub fn init_tensor(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::full(shape.to_vec(), 1.0),
        Init::FanIn(fan_in) => {
            let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
            Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
        }
    }
}

pub(crate) fn add_param(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    init: Init,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    store.add(name, init_tensor(shape, init, rng))
}

/// Largest group count `<= 8` that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::FanIn(in_channels * kernel)
        };
        let weight = add_param(
            store,
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel],
            init,
            rng,
        )?;
        let bias = add_param(
            store,
            format!("{name}.bias"),
            &[out_channels],
            Init::Zeros,
            rng,
        )?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    /// Length-preserving convolution with an odd kernel.
    pub fn same(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        zero_init: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new(
            store,
            name,
            in_channels,
            out_channels,
            kernel,
            1,
            (kernel - 1) / 2,
            zero_init,
            rng,
        )
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv1d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel + self.out_channels
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = add_param(
            store,
            format!("{name}.weight"),
            &[in_features, out_features],
            init,
            rng,
        )?;
        let bias = if bias {
            Some(add_param(
                store,
                format!("{name}.bias"),
                &[out_features],
                Init::Zeros,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + self.bias.map_or(0, |_| self.out_features)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let gamma = add_param(store, format!("{name}.gamma"), &[channels], Init::Ones, rng)?;
        let beta = add_param(store, format!("{name}.beta"), &[channels], Init::Zeros, rng)?;
        Ok(Self {
            gamma,
            beta,
            groups: norm_groups(channels),
            channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, self.groups, gamma, beta, Self::EPS)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Per-channel scale and shift predicted from a conditioning feature vector.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub map: Linear,
    pub channels: usize,
}

impl Modulation {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let map = Linear::new(store, name, features, 2 * channels, true, Init::Zeros, rng)?;
        Ok(Self { map, channels })
    }

    /// `x` is `[B, C, L]`, `features` is `[B, 1, F]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, features: Var) -> Result<Var> {
        let ss = self.map.forward(g, store, features)?;
        g.modulate(x, ss)
    }

    pub fn num_params(&self) -> usize {
        self.map.num_params()
    }
}

/// Multi-head self-attention over `[B, T, C]` without positional encoding.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub heads: usize,
    pub head_features: usize,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        heads: usize,
        head_features: usize,
        zero_out: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let inner = heads * head_features;
        let out_init = if zero_out {
            Init::Zeros
        } else {
            Init::FanIn(inner)
        };
        Ok(Self {
            heads,
            head_features,
            to_q: Linear::new(
                store,
                &format!("{name}.to_q"),
                features,
                inner,
                false,
                Init::FanIn(features),
                rng,
            )?,
            to_k: Linear::new(
                store,
                &format!("{name}.to_k"),
                features,
                inner,
                false,
                Init::FanIn(features),
                rng,
            )?,
            to_v: Linear::new(
                store,
                &format!("{name}.to_v"),
                features,
                inner,
                false,
                Init::FanIn(features),
                rng,
            )?,
            to_out: Linear::new(
                store,
                &format!("{name}.to_out"),
                inner,
                features,
                false,
                out_init,
                rng,
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let q = self.to_q.forward(g, store, x)?;
        let k = self.to_k.forward(g, store, x)?;
        let v = self.to_v.forward(g, store, x)?;
        let o = g.attention(q, k, v, self.heads, None, None)?;
        self.to_out.forward(g, store, o)
    }

    pub fn num_params(&self) -> usize {
        self.to_q.num_params()
            + self.to_k.num_params()
            + self.to_v.num_params()
            + self.to_out.num_params()
    }
}

/// Multi-head attention from `[B, T, C]` queries onto `[B, Tc, Fc]` context.
/// Rows whose context is fully masked attend to a learned null key/value.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub heads: usize,
    pub head_features: usize,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub null_k: ParamId,
    pub null_v: ParamId,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        context_features: usize,
        heads: usize,
        head_features: usize,
        zero_out: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let inner = heads * head_features;
        let out_init = if zero_out {
            Init::Zeros
        } else {
            Init::FanIn(inner)
        };
        Ok(Self {
            heads,
            head_features,
            to_q: Linear::new(
                store,
                &format!("{name}.to_q"),
                features,
                inner,
                false,
                Init::FanIn(features),
                rng,
            )?,
            to_k: Linear::new(
                store,
                &format!("{name}.to_k"),
                context_features,
                inner,
                false,
                Init::FanIn(context_features),
                rng,
            )?,
            to_v: Linear::new(
                store,
                &format!("{name}.to_v"),
                context_features,
                inner,
                false,
                Init::FanIn(context_features),
                rng,
            )?,
            to_out: Linear::new(
                store,
                &format!("{name}.to_out"),
                inner,
                features,
                false,
                out_init,
                rng,
            )?,
            null_k: add_param(
                store,
                format!("{name}.null_k"),
                &[inner],
                Init::FanIn(1),
                rng,
            )?,
            null_v: add_param(
                store,
                format!("{name}.null_v"),
                &[inner],
                Init::FanIn(1),
                rng,
            )?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        context: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let q = self.to_q.forward(g, store, x)?;
        let k = self.to_k.forward(g, store, context)?;
        let v = self.to_v.forward(g, store, context)?;
        let nk = g.param(store, self.null_k);
        let nv = g.param(store, self.null_v);
        let o = g.attention(q, k, v, self.heads, Some(mask), Some((nk, nv)))?;
        self.to_out.forward(g, store, o)
    }

    pub fn num_params(&self) -> usize {
        let inner = self.heads * self.head_features;
        self.to_q.num_params()
            + self.to_k.num_params()
            + self.to_v.num_params()
            + self.to_out.num_params()
            + 2 * inner
    }
}

/// Sinusoidal featurisation of the noise level followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct NoiseEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl NoiseEmbedding {
    pub const SINUSOIDAL_FEATURES: usize = 64;

    pub fn new(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = Self::SINUSOIDAL_FEATURES;
        Ok(Self {
            fc1: Linear::new(
                store,
                &format!("{name}.fc1"),
                n,
                features,
                true,
                Init::FanIn(n),
                rng,
            )?,
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                features,
                features,
                true,
                Init::FanIn(features),
                rng,
            )?,
        })
    }

    /// `[sin(ω_i σ), cos(ω_i σ)]` with log-spaced ω in `[1, 1000]`, shape `[B, 1, 64]`.
    pub fn sinusoidal(sigmas: &[f32]) -> Tensor {
        let half = Self::SINUSOIDAL_FEATURES / 2;
        let mut data = Vec::with_capacity(sigmas.len() * 2 * half);
        for &s in sigmas {
            let freqs = (0..half).map(|i| (i as f64 / (half - 1) as f64 * 1000f64.ln()).exp());
            let angles: Vec<f64> = freqs.map(|w| w * s as f64).collect();
            data.extend(angles.iter().map(|a| a.sin() as f32));
            data.extend(angles.iter().map(|a| a.cos() as f32));
        }
        Tensor::new(vec![sigmas.len(), 1, 2 * half], data).expect("sized above")
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, sigmas: &[f32]) -> Result<Var> {
        let x = g.constant(Self::sinusoidal(sigmas));
        let h = self.fc1.forward(g, store, x)?;
        let h = g.silu(h);
        let h = self.fc2.forward(g, store, h)?;
        Ok(g.silu(h))
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

/// Learnable strided-convolution downsampling by an integer factor.
///
/// Uses a `2f + 1` kernel with stride `f`; factor 1 is a plain length-preserving
/// projection.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub factor: usize,
    pub conv: Conv1d,
}

impl Downsample {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        factor: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if factor == 0 {
            return Err(crate::Error::InvalidArgument(
                "resampling factor must be >= 1".into(),
            ));
        }
        let conv = Conv1d::new(
            store,
            name,
            in_channels,
            out_channels,
            2 * factor + 1,
            factor,
            factor,
            false,
            rng,
        )?;
        Ok(Self { factor, conv })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let len = g.value(x).dims3()?.2;
        if len % self.factor != 0 {
            return Err(crate::Error::Shape(format!(
                "length {len} is not divisible by downsampling factor {}",
                self.factor
            )));
        }
        self.conv.forward(g, store, x)
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params()
    }
}

/// Nearest-neighbour repeat by an integer factor followed by a 3-tap convolution.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub factor: usize,
    pub conv: Conv1d,
}

impl Upsample {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        factor: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if factor == 0 {
            return Err(crate::Error::InvalidArgument(
                "resampling factor must be >= 1".into(),
            ));
        }
        let conv = Conv1d::same(store, name, in_channels, out_channels, 3, false, rng)?;
        Ok(Self { factor, conv })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = g.repeat_time(x, self.factor)?;
        self.conv.forward(g, store, h)
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params()
    }
}
