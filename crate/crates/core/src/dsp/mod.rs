//! Signal-processing primitives and the autoencoder loss functions.

mod loss;
mod mel;
mod stft;
mod wave;

pub use loss::{
    combined_ae_loss, critic_hinge_loss, generator_adv_loss, mssd, mssd_channel, rec_l1_grad, rec_l1_loss,
    AeLossWeights, MultiScaleConfig,
};
pub use mel::{mel_from_power, mel_project, MelFilterbank};
pub use stft::{istft, log_mag, stft, Spectrogram, StftConfig, StftPlan, WindowKind};
pub use wave::{SampleFormat, Waveform};
