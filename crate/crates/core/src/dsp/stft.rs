use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hann,
    /// Rectangular window. Only COLA-valid with `hop == win`.
    Rect,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn samples(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
            WindowKind::Rect => vec![1.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub hop_len: usize,
    pub win_len: usize,
    #[serde(default)]
    pub window: WindowKind,
    pub eps: f64,
}

impl StftConfig {
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// Validates the window/hop pair: the squared window must overlap-add to a
    /// constant at this hop, otherwise resynthesis would not be exact.
    pub fn new(hop_len: usize, win_len: usize, window: WindowKind, eps: f64) -> Result<Self> {
        let cfg = Self { hop_len, win_len, window, eps };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hann window of `4 * hop_len`.
    pub fn with_hop(hop_len: usize) -> Result<Self> {
        Self::new(hop_len, 4 * hop_len, WindowKind::Hann, Self::DEFAULT_EPS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_len == 0 || self.win_len < self.hop_len {
            return Err(Error::Config(format!("need 0 < hop ({}) <= win ({})", self.hop_len, self.win_len)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("log-magnitude eps must be positive".into()));
        }
        let w = self.window.samples(self.win_len);
        let mut env = vec![0.0; self.hop_len];
        for (i, x) in w.iter().enumerate() {
            env[i % self.hop_len] += x * x;
        }
        let (lo, hi) = env.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if lo <= 0.0 || (hi - lo) > 1e-9 * hi {
            return Err(Error::Config(format!(
                "{:?} window of {} is not overlap-add constant at hop {}",
                self.window, self.win_len, self.hop_len
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.win_len / 2 + 1
    }

    /// Number of centered frames for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop_len)
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { hop_len: 256, win_len: 1024, window: WindowKind::Hann, eps: Self::DEFAULT_EPS }
    }
}

/// Complex STFT frames, `n_frames x n_bins`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: Vec<Complex64>,
    n_frames: usize,
    config: StftConfig,
    signal_len: usize,
}

impl Spectrogram {
    pub fn new(frames: Vec<Complex64>, n_frames: usize, config: StftConfig, signal_len: usize) -> Result<Self> {
        if frames.len() != n_frames * config.n_bins() {
            return Err(Error::Shape(format!(
                "{} frame values for {n_frames} frames of {} bins",
                frames.len(),
                config.n_bins()
            )));
        }
        Ok(Self { frames, n_frames, config, signal_len })
    }

    pub fn zeros(config: StftConfig, signal_len: usize) -> Self {
        let n_frames = config.n_frames(signal_len);
        Self { frames: vec![Complex64::new(0.0, 0.0); n_frames * config.n_bins()], n_frames, config, signal_len }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.config.n_bins()
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn frame(&self, f: usize) -> &[Complex64] {
        let b = self.n_bins();
        &self.frames[f * b..(f + 1) * b]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [Complex64] {
        let b = self.n_bins();
        &mut self.frames[f * b..(f + 1) * b]
    }

    pub fn values(&self) -> &[Complex64] {
        &self.frames
    }
}

/// A window plus cached FFT plans for one [`StftConfig`].
///
/// Frames are centered: frame `f` covers samples `f*hop - win/2 .. f*hop + win/2`
/// of the zero-extended signal. Resynthesis divides by the overlapped squared
/// window, which makes `istft(stft(x)) == x` up to rounding.
pub struct StftPlan {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("config", &self.config).finish()
    }
}

impl StftPlan {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window.samples(config.win_len),
            forward: planner.plan_fft_forward(config.win_len),
            inverse: planner.plan_fft_inverse(config.win_len),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    fn pad(&self) -> usize {
        self.config.win_len / 2
    }

    /// Windowed DFT of every frame; returns `n_frames * n_bins` values.
    fn analyze(&self, x: &[f64]) -> (Vec<Complex64>, usize) {
        let (win, hop, pad) = (self.config.win_len, self.config.hop_len, self.pad());
        let bins = self.config.n_bins();
        let n_frames = self.config.n_frames(x.len());
        let mut out = Vec::with_capacity(n_frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); win];
        for f in 0..n_frames {
            for (n, slot) in buf.iter_mut().enumerate() {
                let t = (f * hop + n) as isize - pad as isize;
                let v = if t >= 0 && (t as usize) < x.len() { x[t as usize] } else { 0.0 };
                *slot = Complex64::new(v * self.window[n], 0.0);
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        (out, n_frames)
    }

    /// Overlapped squared window at each output sample.
    fn envelope(&self, n_frames: usize, out_len: usize) -> Vec<f64> {
        let (win, hop, pad) = (self.config.win_len, self.config.hop_len, self.pad());
        let mut env = vec![0.0; out_len];
        for f in 0..n_frames {
            for n in 0..win {
                let t = (f * hop + n) as isize - pad as isize;
                if t >= 0 && (t as usize) < out_len {
                    env[t as usize] += self.window[n] * self.window[n];
                }
            }
        }
        env
    }

    /// Inverse DFT of one half-spectrum frame (imaginary parts of DC and
    /// Nyquist are ignored), written into `buf`.
    fn frame_to_time(&self, half: impl Fn(usize) -> Complex64, buf: &mut [Complex64]) {
        let win = self.config.win_len;
        let bins = self.config.n_bins();
        for k in 0..bins {
            buf[k] = half(k);
        }
        buf[0].im = 0.0;
        if win.is_multiple_of(2) {
            buf[win / 2].im = 0.0;
        }
        for k in bins..win {
            buf[k] = buf[win - k].conj();
        }
        self.inverse.process(buf);
        let scale = 1.0 / win as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }

    fn synthesize(&self, half: impl Fn(usize, usize) -> Complex64, n_frames: usize, out_len: usize) -> Vec<f64> {
        let (win, hop, pad) = (self.config.win_len, self.config.hop_len, self.pad());
        let mut out = vec![0.0; out_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); win];
        for f in 0..n_frames {
            self.frame_to_time(|k| half(f, k), &mut buf);
            for n in 0..win {
                let t = (f * hop + n) as isize - pad as isize;
                if t >= 0 && (t as usize) < out_len {
                    out[t as usize] += self.window[n] * buf[n].re;
                }
            }
        }
        let env = self.envelope(n_frames, out_len);
        for (o, e) in out.iter_mut().zip(&env) {
            if *e > 0.0 {
                *o /= e;
            }
        }
        out
    }

    pub fn stft(&self, x: &[f64]) -> Result<Spectrogram> {
        if x.len() < self.config.win_len {
            return Err(Error::Length { len: x.len(), min: self.config.win_len });
        }
        let (frames, n_frames) = self.analyze(x);
        Ok(Spectrogram { frames, n_frames, config: self.config, signal_len: x.len() })
    }

    pub fn istft(&self, spec: &Spectrogram) -> Result<Vec<f64>> {
        if spec.config != self.config {
            return Err(Error::Config("spectrogram was built with a different STFT config".into()));
        }
        let bins = self.config.n_bins();
        Ok(self.synthesize(|f, k| spec.frames[f * bins + k], spec.n_frames, spec.signal_len))
    }

    /// Squared magnitude `|STFT(x)|^2` laid out `n_bins x n_frames`.
    /// Unlike [`StftPlan::stft`] this accepts signals shorter than one window.
    pub fn power(&self, x: &[f64]) -> Tensor {
        let (frames, n_frames) = self.analyze(x);
        let bins = self.config.n_bins();
        Tensor::from_fn(bins, n_frames, |k, f| frames[f * bins + k].norm_sqr())
    }

    /// Vector-Jacobian product of [`StftPlan::power`] at `x`.
    pub fn power_backward(&self, x: &[f64], grad: &Tensor) -> Vec<f64> {
        let (win, hop, pad) = (self.config.win_len, self.config.hop_len, self.pad());
        let bins = self.config.n_bins();
        let (frames, n_frames) = self.analyze(x);
        debug_assert_eq!(grad.shape(), (bins, n_frames));
        let mut dx = vec![0.0; x.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); win];
        for f in 0..n_frames {
            // d|X_k|^2/dx_n = 2 w_n Re(X_k e^{+i 2 pi k n / N})
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = if k < bins { frames[f * bins + k] * grad.get(k, f) } else { Complex64::new(0.0, 0.0) };
            }
            self.inverse.process(&mut buf);
            for n in 0..win {
                let t = (f * hop + n) as isize - pad as isize;
                if t >= 0 && (t as usize) < x.len() {
                    dx[t as usize] += 2.0 * self.window[n] * buf[n].re;
                }
            }
        }
        dx
    }

    /// Resynthesis from real and imaginary parts, each `n_bins x n_frames`.
    pub fn synthesize_parts(&self, re: &Tensor, im: &Tensor, out_len: usize) -> Vec<f64> {
        let n_frames = re.cols();
        self.synthesize(|f, k| Complex64::new(re.get(k, f), im.get(k, f)), n_frames, out_len)
    }

    /// Vector-Jacobian product of [`StftPlan::synthesize_parts`]; returns the
    /// gradients for the real and imaginary parts.
    pub fn synthesize_parts_backward(&self, grad: &[f64], n_frames: usize) -> (Tensor, Tensor) {
        let (win, hop, pad) = (self.config.win_len, self.config.hop_len, self.pad());
        let bins = self.config.n_bins();
        let env = self.envelope(n_frames, grad.len());
        let mut dre = Tensor::zeros(bins, n_frames);
        let mut dim = Tensor::zeros(bins, n_frames);
        let mut buf = vec![Complex64::new(0.0, 0.0); win];
        for f in 0..n_frames {
            for (n, slot) in buf.iter_mut().enumerate() {
                let t = (f * hop + n) as isize - pad as isize;
                let g = if t >= 0 && (t as usize) < grad.len() && env[t as usize] > 0.0 {
                    grad[t as usize] * self.window[n] / env[t as usize]
                } else {
                    0.0
                };
                *slot = Complex64::new(g, 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                let edge = k == 0 || (win % 2 == 0 && k == win / 2);
                let c = if edge { 1.0 } else { 2.0 } / win as f64;
                dre.set(k, f, c * buf[k].re);
                dim.set(k, f, if edge { 0.0 } else { c * buf[k].im });
            }
        }
        (dre, dim)
    }
}

pub fn stft(channel: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    StftPlan::new(*cfg)?.stft(channel)
}

pub fn istft(spec: &Spectrogram) -> Result<Vec<f64>> {
    StftPlan::new(spec.config)?.istft(spec)
}

/// `log(|X|^2 + eps)`, `n_frames x n_bins`.
pub fn log_mag(spec: &Spectrogram) -> Tensor {
    let eps = spec.config.eps;
    Tensor::from_fn(spec.n_frames, spec.n_bins(), |f, k| (spec.frame(f)[k].norm_sqr() + eps).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_cola_pairs() {
        assert!(StftConfig::new(256, 1024, WindowKind::Hann, 1e-5).is_ok());
        // Squared Hann does not overlap-add to a constant at 50% overlap.
        assert!(matches!(StftConfig::new(512, 1024, WindowKind::Hann, 1e-5), Err(Error::Config(_))));
        assert!(StftConfig::new(64, 64, WindowKind::Rect, 1e-5).is_ok());
        assert!(matches!(StftConfig::new(32, 64, WindowKind::Hann, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn frame_count_is_ceil_of_len_over_hop() {
        let cfg = StftConfig::with_hop(256).unwrap();
        let spec = stft(&vec![0.0; 1025], &cfg).unwrap();
        assert_eq!(spec.n_frames(), 5);
        assert_eq!(spec.n_bins(), 513);
        assert!(spec.values().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn short_signal_is_a_length_error() {
        let cfg = StftConfig::with_hop(256).unwrap();
        assert!(matches!(stft(&[0.0; 1000], &cfg), Err(Error::Length { len: 1000, min: 1024 })));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        // Direct DFT of one Hann-windowed frame of a 440 Hz tone at 44.1 kHz
        // peaks at bin 10 (440 * 1024 / 44100 = 10.2).
        let (sr, n) = (44100.0, 1024);
        let w = WindowKind::Hann.samples(n);
        let mag = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for t in 0..n {
                let x = (2.0 * PI * 440.0 * t as f64 / sr).sin() * w[t];
                re += x * (2.0 * PI * (k * t) as f64 / n as f64).cos();
                im -= x * (2.0 * PI * (k * t) as f64 / n as f64).sin();
            }
            re.hypot(im)
        };
        let oracle_peak = (0..=n / 2).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
        assert_eq!(oracle_peak, 10);

        let x: Vec<f64> = (0..8192).map(|t| (2.0 * PI * 440.0 * t as f64 / sr).sin()).collect();
        let spec = stft(&x, &StftConfig::with_hop(256).unwrap()).unwrap();
        let mid = spec.frame(spec.n_frames() / 2);
        let peak = (0..mid.len()).max_by(|&a, &b| mid[a].norm().total_cmp(&mid[b].norm())).unwrap();
        assert_eq!(peak, 10);
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = StftConfig::with_hop(256).unwrap();
        let plan = StftPlan::new(cfg).unwrap();
        for len in [4096, 5000, 7777] {
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = plan.istft(&plan.stft(&x).unwrap()).unwrap();
            assert_eq!(y.len(), x.len());
            let err = x.iter().zip(&y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-10, "len {len}: {err}");
        }
    }

    #[test]
    fn single_dc_frame_resynthesizes_as_windowed_constant() {
        let cfg = StftConfig::new(16, 64, WindowKind::Hann, 1e-5).unwrap();
        let len = 256;
        let mut spec = Spectrogram::zeros(cfg, len);
        let f = 8;
        spec.frame_mut(f)[0] = Complex64::new(64.0, 0.0);
        let y = istft(&spec).unwrap();

        // One frame of value 1 (= 64 / 64) windowed and overlap-added, then
        // divided by the squared-window envelope, which is 1.5 away from the edges.
        let w = WindowKind::Hann.samples(64);
        for (t, &v) in y.iter().enumerate() {
            let n = t as isize - (f * 16) as isize + 32;
            let expect = if (0..64).contains(&n) { w[n as usize] / 1.5 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12, "t={t}: {v} vs {expect}");
        }
    }

    #[test]
    fn log_mag_constant_for_silence() {
        let cfg = StftConfig::with_hop(64).unwrap();
        let lm = log_mag(&stft(&[0.0; 512], &cfg).unwrap());
        assert!(lm.data().iter().all(|&v| v == (1e-5f64).ln()));
    }
}
