//! Differentiable 1D tensor operations and the layers built from them.

mod attention;
mod graph;
pub(crate) mod kernels;
pub mod layers;
mod ops;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{
    Conv1d, CrossAttention, Downsample, GroupNorm, Init, Linear, Modulation, NoiseEmbedding,
    SelfAttention, Upsample,
};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{cosine_similarity, Tensor};

/// Alias for the recorded computation used in gradient evaluation.
pub type GradTape = Graph;
