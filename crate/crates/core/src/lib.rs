//! Two-stage latent diffusion for text-conditioned music generation.
//!
//! Stage 1 is a diffusion magnitude-autoencoder ([`dmae`]): a convolutional
//! encoder compresses the magnitude spectrogram into a bounded latent, and a
//! waveform-domain diffusion U-Net decodes it back to audio. Stage 2
//! ([`tcld`]) is a text-conditioned diffusion model over that latent space.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod dmae;
pub mod error;
pub mod nn;
pub mod profile;
pub mod signal;
pub mod tcld;
pub mod train;
pub mod unet;

pub use error::{Error, ErrorKind, Result};
