//! Accompaniment generation in latent space.
//!
//! Waveforms are compressed by a spectrogram autoencoder ([`autoencoder`]) into
//! latent sequences. A conditional U-Net ([`denoiser`]) learns the distribution of
//! stem latents given mix latents, and [`diffusion`] holds the schedule, the
//! v-parameterization, classifier-free guidance with rescaling, style grounding
//! and the DDIM sampler. [`pipeline`] wires everything to files, datasets and
//! evaluation metrics.

pub mod autoencoder;
pub mod denoiser;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
