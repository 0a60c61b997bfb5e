use rand::Rng;

use super::AutoencoderConfig;
use crate::dsp::MelFilterbank;
use crate::error::Result;
use crate::nn::{Conv1d, ConvBlock, Graph, ParamStore, Resample, Var};
use crate::tensor::Tensor;

/// Convolutional critic: `channels x F` map in, scalar score out (time-averaged).
#[derive(Clone, Debug)]
pub struct CriticNet {
    conv_in: Conv1d,
    blocks: Vec<ConvBlock>,
    conv_out: Conv1d,
}

impl CriticNet {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, width: usize, rng: &mut impl Rng) -> Self {
        let conv_in = Conv1d::new(store, &format!("{name}.in"), (in_channels, width), 3, 1, 1.0, rng);
        let blocks = (0..2)
            .map(|i| ConvBlock::new(store, &format!("{name}.block{i}"), (width, width), 0, Resample::Down, rng))
            .collect();
        let conv_out = Conv1d::new(store, &format!("{name}.out"), (width, 1), 1, 1, 0.5, rng);
        Self { conv_in, blocks, conv_out }
    }

    pub fn score(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = self.conv_in.forward(g, x);
        for b in &self.blocks {
            h = b.forward(g, h, None);
        }
        let h = g.silu(h);
        let h = self.conv_out.forward(g, h);
        g.mean(h)
    }
}

/// The linear-frequency critic and the mel critic, plus the mel projection.
#[derive(Clone, Debug)]
pub struct Critics {
    pub linear: CriticNet,
    pub mel: CriticNet,
    /// `M x B` projection (transposed filterbank weights).
    mel_proj: Tensor,
}

impl Critics {
    pub fn new(store: &mut ParamStore, cfg: &AutoencoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let fb = MelFilterbank::new(cfg.sample_rate, cfg.stft_config().win_len, cfg.n_mels)?;
        let width = cfg.base_channels;
        let linear = CriticNet::new(store, "critic.linear", 2 * cfg.n_bins(), width, rng);
        let mel = CriticNet::new(store, "critic.mel", 2 * cfg.n_mels, width, rng);
        Ok(Self { linear, mel, mel_proj: fb.weights().transpose() })
    }

    pub fn mel_projection(&self) -> &Tensor {
        &self.mel_proj
    }

    /// Linear and mel critic scores for one example, given the per-channel
    /// linear power spectrograms (`B x F` each).
    pub fn scores(&self, g: &mut Graph, power: [Var; 2], eps: f64) -> [Var; 2] {
        let proj = g.input(self.mel_proj.clone());
        let mut lin = Vec::with_capacity(2);
        let mut mel = Vec::with_capacity(2);
        for p in power {
            let lp = g.add_scalar(p, eps);
            lin.push(g.ln(lp));
            let m = g.matmul(proj, p);
            let m = g.add_scalar(m, eps);
            mel.push(g.ln(m));
        }
        let lin = g.concat_rows(&lin);
        let mel = g.concat_rows(&mel);
        [self.linear.score(g, lin), self.mel.score(g, mel)]
    }
}
