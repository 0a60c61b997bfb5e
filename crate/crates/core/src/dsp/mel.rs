use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning `[0, sr/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// `n_bins x n_mels`, non-negative.
    weights: Tensor,
    sample_rate: u32,
}

impl MelFilterbank {
    pub const DEFAULT_MELS: usize = 128;

    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize) -> Result<Self> {
        if n_mels == 0 || n_fft < 2 || sample_rate == 0 {
            return Err(Error::Config("mel filterbank needs n_mels > 0, n_fft >= 2, sr > 0".into()));
        }
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
        let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
        let weights = Tensor::from_fn(n_bins, n_mels, |k, m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let f = bin_hz(k);
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            up.min(down).max(0.0)
        });
        Ok(Self { weights, sample_rate })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn n_bins(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.weights.cols()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// Projects a power spectrogram (`frames x bins`) to log-mel (`frames x mels`).
pub fn mel_from_power(power: &Tensor, fb: &MelFilterbank, eps: f64) -> Result<Tensor> {
    if power.cols() != fb.n_bins() {
        return Err(Error::Shape(format!("{} bins, filterbank expects {}", power.cols(), fb.n_bins())));
    }
    Ok(power.matmul(&fb.weights).map(|p| (p + eps).ln()))
}

/// Log-mel view of a log-magnitude spectrogram: power is recovered as
/// `exp(logmag) - eps`, projected, then re-logged with the same `eps`.
pub fn mel_project(logmag: &Tensor, fb: &MelFilterbank, eps: f64) -> Result<Tensor> {
    let power = logmag.map(|l| (l.exp() - eps).max(0.0));
    mel_from_power(&power, fb, eps)
}
