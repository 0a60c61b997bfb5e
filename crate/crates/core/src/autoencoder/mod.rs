//! Spectrogram autoencoder.
//!
//! The encoder reads the stacked log-power spectrograms of both channels
//! (`2B x F`) and downsamples time by `2^n_stages` into a `D x N` latent. The
//! decoder mirrors it and emits, per channel, a log-power head (compared to the
//! input spectrogram) and an unnormalized `(cos, sin)` phase pair per bin. The
//! two are combined into complex frames and resynthesized with the inverse STFT.

mod critic;
mod latent;
mod train;

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use critic::{CriticNet, Critics};
pub use latent::{LatentSequence, SourceKind, LATS_MAGIC, LATS_VERSION};
pub use train::{AeLosses, AeTrainer};

use crate::dsp::{AeLossWeights, MelFilterbank, MultiScaleConfig, StftConfig, StftPlan, Waveform, WindowKind};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, Checkpoint, Conv1d, ConvBlock, Graph, ParamId, ParamStore, Resample, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "autoencoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub sample_rate: u32,
    /// Waveform samples per latent timestep.
    pub r_time: usize,
    pub latent_dim: usize,
    pub base_channels: usize,
    /// Stride-2 stages between spectrogram frames and latent steps.
    pub n_stages: usize,
    pub source_kind: SourceKind,
    pub loss_weights: AeLossWeights,
    pub use_critics: bool,
    pub mssd: MultiScaleConfig,
    /// Mel bands seen by the second critic.
    pub n_mels: usize,
    pub eps: f64,
    /// Training crop length in seconds.
    pub crop_secs: f64,
}

/// Fixed standardization of log-power: the encoder sees
/// `(s - CENTER) / SCALE` and the decoder's first `2B` rows are mapped back.
const LOG_POWER_CENTER: f64 = -4.0;
const LOG_POWER_SCALE: f64 = 4.0;

impl AutoencoderConfig {
    /// Small model: 16 kHz, r_time 256, 8 latent dims, 3 stages (hop 32).
    pub fn desk(source_kind: SourceKind) -> Self {
        Self {
            sample_rate: 16_000,
            r_time: 256,
            latent_dim: 8,
            base_channels: 32,
            n_stages: 3,
            source_kind,
            loss_weights: AeLossWeights::default(),
            use_critics: false,
            mssd: MultiScaleConfig { hop_lens: vec![16, 32, 64, 128, 256], win_factor: 4 },
            n_mels: 32,
            eps: StftConfig::DEFAULT_EPS,
            crop_secs: 0.256,
        }
    }

    /// Full-size layout: 44.1 kHz, r_time 4096 from hop 256 and four stages,
    /// 64 dims for mixes and 32 for stems, both critics enabled.
    pub fn full(source_kind: SourceKind) -> Self {
        Self {
            sample_rate: 44_100,
            r_time: 4096,
            latent_dim: if source_kind == SourceKind::Mix { 64 } else { 32 },
            base_channels: 128,
            n_stages: 4,
            source_kind,
            loss_weights: AeLossWeights::default(),
            use_critics: true,
            mssd: MultiScaleConfig::default(),
            n_mels: MelFilterbank::DEFAULT_MELS,
            eps: StftConfig::DEFAULT_EPS,
            crop_secs: 1.5,
        }
    }

    pub fn hop_len(&self) -> usize {
        self.r_time >> self.n_stages
    }

    pub fn stft_config(&self) -> StftConfig {
        StftConfig { hop_len: self.hop_len(), win_len: 4 * self.hop_len(), window: WindowKind::Hann, eps: self.eps }
    }

    pub fn n_bins(&self) -> usize {
        2 * self.hop_len() + 1
    }

    pub fn crop_len(&self) -> usize {
        let raw = (self.crop_secs * self.sample_rate as f64).round() as usize;
        raw.div_ceil(self.r_time).max(1) * self.r_time
    }

    /// Channel width after stage `i` (stage 0 is the input projection).
    fn width(&self, i: usize) -> usize {
        self.base_channels << i.min(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.base_channels == 0 || self.n_stages == 0 {
            return Err(Error::Config("autoencoder sizes must be positive".into()));
        }
        let factor = 1usize << self.n_stages;
        if !self.r_time.is_multiple_of(factor) || self.hop_len() == 0 {
            return Err(Error::Config(format!("r_time {} is not divisible by 2^{}", self.r_time, self.n_stages)));
        }
        self.stft_config().validate()?;
        self.loss_weights.validate()?;
        self.mssd.validate()?;
        if self.use_critics && self.n_mels == 0 {
            return Err(Error::Config("mel critic needs n_mels > 0".into()));
        }
        Ok(())
    }
}

/// Decoder outputs for one example.
pub struct Decoded {
    /// Predicted log-power, both channels stacked (`2B x F`).
    pub log_power: Var,
    /// Resynthesized channels, each `1 x T`.
    pub wave: [Var; 2],
}

pub struct Autoencoder {
    config: AutoencoderConfig,
    params: ParamStore,
    enc_in: Conv1d,
    enc_blocks: Vec<ConvBlock>,
    enc_out: Conv1d,
    dec_in: Conv1d,
    dec_blocks: Vec<ConvBlock>,
    dec_out: Conv1d,
    critics: Option<Critics>,
    ae_ids: Vec<ParamId>,
    plan: Arc<StftPlan>,
}

impl std::fmt::Debug for Autoencoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Autoencoder").field("config", &self.config).field("params", &self.params.num_scalars()).finish()
    }
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let bins2 = 2 * config.n_bins();
        let n = config.n_stages;

        let enc_in = Conv1d::new(&mut p, "enc.in", (bins2, config.width(0)), 3, 1, 1.0, &mut rng);
        let enc_blocks = (0..n)
            .map(|i| ConvBlock::new(&mut p, &format!("enc.block{i}"), (config.width(i), config.width(i + 1)), 0, Resample::Down, &mut rng))
            .collect();
        let enc_out = Conv1d::new(&mut p, "enc.out", (config.width(n), config.latent_dim), 1, 1, 0.5, &mut rng);

        let dec_in = Conv1d::new(&mut p, "dec.in", (config.latent_dim, config.width(n)), 3, 1, 1.0, &mut rng);
        let dec_blocks = (0..n)
            .rev()
            .map(|i| ConvBlock::new(&mut p, &format!("dec.block{i}"), (config.width(i + 1), config.width(i)), 0, Resample::Up, &mut rng))
            .collect();
        let dec_out = Conv1d::new(&mut p, "dec.out", (config.width(0), 3 * bins2), 3, 1, 0.1, &mut rng);
        let ae_ids = p.ids().collect();

        let critics = if config.use_critics { Some(Critics::new(&mut p, &config, &mut rng)?) } else { None };
        let plan = Arc::new(StftPlan::new(config.stft_config())?);
        Ok(Self { config, params: p, enc_in, enc_blocks, enc_out, dec_in, dec_blocks, dec_out, critics, ae_ids, plan })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Encoder and decoder parameters (critics excluded).
    pub fn ae_param_ids(&self) -> &[ParamId] {
        &self.ae_ids
    }

    pub fn critic_param_ids(&self) -> Vec<ParamId> {
        self.params.ids().skip(self.ae_ids.len()).collect()
    }

    pub fn critics(&self) -> Option<&Critics> {
        self.critics.as_ref()
    }

    pub fn plan(&self) -> &Arc<StftPlan> {
        &self.plan
    }

    fn check_rate(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate() != self.config.sample_rate {
            return Err(Error::Data(format!(
                "waveform is {} Hz, autoencoder expects {} Hz",
                w.sample_rate(),
                self.config.sample_rate
            )));
        }
        Ok(())
    }

    /// Zero-pads on the right to a whole number of latent steps.
    pub fn pad_input(&self, w: &Waveform) -> Waveform {
        w.padded_to_multiple(self.config.r_time)
    }

    /// Stacked `log(|STFT|^2 + eps)` of both channels, `2B x F`. The input
    /// length must be a multiple of `r_time`.
    pub fn log_power_input(&self, w: &Waveform) -> Tensor {
        let eps = self.config.eps;
        let parts: Vec<Tensor> = (0..2).map(|c| self.plan.power(w.channel(c)).map(|p| (p + eps).ln())).collect();
        let (b, f) = parts[0].shape();
        let mut data = parts[0].data().to_vec();
        data.extend_from_slice(parts[1].data());
        Tensor::from_vec(2 * b, f, data)
    }

    /// `2B x F` log-power to `D x N` latent.
    pub fn encode_graph(&self, g: &mut Graph, spec: Var) -> Var {
        let x = g.add_scalar(spec, -LOG_POWER_CENTER);
        let x = g.scale(x, 1.0 / LOG_POWER_SCALE);
        let mut h = self.enc_in.forward(g, x);
        for blk in &self.enc_blocks {
            h = blk.forward(g, h, None);
        }
        let h = g.silu(h);
        self.enc_out.forward(g, h)
    }

    /// `D x N` latent to log-power and waveform outputs.
    pub fn decode_graph(&self, g: &mut Graph, z: Var) -> Decoded {
        let mut h = self.dec_in.forward(g, z);
        for blk in &self.dec_blocks {
            h = blk.forward(g, h, None);
        }
        let h = g.silu(h);
        let out = self.dec_out.forward(g, h);
        let b = self.config.n_bins();
        let raw = g.slice_rows(out, 0, 2 * b);
        let raw = g.scale(raw, LOG_POWER_SCALE);
        let log_power = g.add_scalar(raw, LOG_POWER_CENTER);
        let wave = [0, 1].map(|c| {
            let lp = g.slice_rows(log_power, c * b, b);
            let a = g.slice_rows(out, 2 * b + 2 * c * b, b);
            let s = g.slice_rows(out, 2 * b + (2 * c + 1) * b, b);
            // amplitude = exp(log_power / 2); phase = (a, s) / |(a, s)|
            let half = g.scale(lp, 0.5);
            let amp = g.exp(half);
            let a2 = g.mul(a, a);
            let s2 = g.mul(s, s);
            let n2 = g.add(a2, s2);
            let n2 = g.add_scalar(n2, 1e-8);
            let inv = g.powf(n2, -0.5);
            let scale = g.mul(amp, inv);
            let re = g.mul(scale, a);
            let im = g.mul(scale, s);
            g.istft(re, im, self.plan.clone())
        });
        Decoded { log_power, wave }
    }

    pub fn encode(&self, w: &Waveform) -> Result<LatentSequence> {
        if w.is_empty() {
            return Err(Error::Data("cannot encode an empty waveform".into()));
        }
        self.check_rate(w)?;
        let w = self.pad_input(w);
        let mut g = Graph::new(&self.params);
        let s = g.input(self.log_power_input(&w));
        let z = self.encode_graph(&mut g, s);
        let vectors = g.value(z).transpose();
        LatentSequence::new(vectors, self.config.r_time as u32, self.config.source_kind)
    }

    pub fn decode(&self, c: &LatentSequence) -> Result<Waveform> {
        if c.dim() != self.config.latent_dim {
            return Err(Error::Shape(format!("latent dim {}, decoder expects {}", c.dim(), self.config.latent_dim)));
        }
        let mut g = Graph::new(&self.params);
        let z = g.input(c.vectors().transpose());
        let dec = self.decode_graph(&mut g, z);
        let [l, r] = dec.wave.map(|v| g.value(v).data().to_vec());
        Waveform::new(l, r, self.config.sample_rate)
    }

    /// `decode(encode(w))`, trimmed back to the input length.
    pub fn reconstruct(&self, w: &Waveform) -> Result<Waveform> {
        Ok(self.decode(&self.encode(w)?)?.resized(w.len()))
    }

    pub fn to_checkpoint(&self) -> Result<(serde_json::Value, &ParamStore)> {
        let cfg = serde_json::to_value(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        Ok((cfg, &self.params))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (cfg, params) = self.to_checkpoint()?;
        save_checkpoint(path, CHECKPOINT_KIND, &cfg, params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("checkpoint holds a {}, not an autoencoder", ck.kind)));
        }
        let config: AutoencoderConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::Format(format!("autoencoder config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        model.params.load_from(&ck.params)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}
