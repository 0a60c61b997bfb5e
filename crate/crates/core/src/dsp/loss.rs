use serde::{Deserialize, Serialize};

use super::stft::{StftConfig, StftPlan, WindowKind};
use super::wave::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hop sizes for the multi-scale spectral distance. The window at each scale
/// is `win_factor * hop`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiScaleConfig {
    pub hop_lens: Vec<usize>,
    pub win_factor: usize,
}

impl Default for MultiScaleConfig {
    /// 2^5 .. 2^12 without 2^10.
    fn default() -> Self {
        Self { hop_lens: vec![32, 64, 128, 256, 512, 2048, 4096], win_factor: 4 }
    }
}

impl MultiScaleConfig {
    pub fn new(hop_lens: Vec<usize>, win_factor: usize) -> Result<Self> {
        let cfg = Self { hop_lens, win_factor };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The default set with the 1024 hop restored.
    pub fn with_full_octaves() -> Self {
        Self { hop_lens: vec![32, 64, 128, 256, 512, 1024, 2048, 4096], win_factor: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_lens.is_empty() {
            return Err(Error::Config("multi-scale hop list is empty".into()));
        }
        if !self.hop_lens.iter().all(|h| h.is_power_of_two()) {
            return Err(Error::Config(format!("hops must be powers of two: {:?}", self.hop_lens)));
        }
        if !self.hop_lens.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!("hops must be strictly increasing: {:?}", self.hop_lens)));
        }
        if self.win_factor == 0 {
            return Err(Error::Config("win_factor must be positive".into()));
        }
        Ok(())
    }

    pub fn plans(&self) -> Result<Vec<StftPlan>> {
        self.validate()?;
        self.hop_lens
            .iter()
            .map(|&h| StftPlan::new(StftConfig::new(h, h * self.win_factor, WindowKind::Hann, StftConfig::DEFAULT_EPS)?))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeLossWeights {
    pub lambda_rec: f64,
    pub lambda_mssd: f64,
}

impl Default for AeLossWeights {
    fn default() -> Self {
        Self { lambda_rec: 25.0, lambda_mssd: 0.002 }
    }
}

impl AeLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_rec < 0.0 || self.lambda_mssd < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference between predicted and target log-magnitudes.
pub fn rec_l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// Gradient of [`rec_l1_loss`] with respect to `pred`: `sign(pred - target) / N`.
pub fn rec_l1_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred.zip_map(target, |p, t| if p > t { 1.0 / n } else if p < t { -1.0 / n } else { 0.0 }))
}

/// Sum over scales of the mean L1 distance between squared-magnitude
/// spectrograms of one channel.
pub fn mssd_channel(a: &[f64], b: &[f64], plans: &[StftPlan]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("mssd inputs differ in length ({} vs {})", a.len(), b.len())));
    }
    let mut total = 0.0;
    for plan in plans {
        let pa = plan.power(a);
        let pb = plan.power(b);
        total += pa.data().iter().zip(pb.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / pa.len() as f64;
    }
    Ok(total)
}

/// Multi-scale spectral distance, averaged over the two channels.
pub fn mssd(a: &Waveform, b: &Waveform, cfg: &MultiScaleConfig) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("mssd inputs differ in length ({} vs {})", a.len(), b.len())));
    }
    let plans = cfg.plans()?;
    let mut total = 0.0;
    for ch in 0..2 {
        total += mssd_channel(a.channel(ch), b.channel(ch), &plans)?;
    }
    Ok(total / 2.0)
}

fn non_empty(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Data(format!("{what} scores are empty")));
    }
    Ok(())
}

/// Hinge objective for a critic: `-E[min(0, -1 + C(real))] - E[min(0, -1 - C(fake))]`.
pub fn critic_hinge_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    non_empty(real_scores, "real")?;
    non_empty(fake_scores, "fake")?;
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64;
    Ok(-mean(real_scores, &|s| (-1.0 + s).min(0.0)) - mean(fake_scores, &|s| (-1.0 - s).min(0.0)))
}

/// Adversarial term for the autoencoder: `-E[C(fake)]`.
pub fn generator_adv_loss(fake_scores: &[f64]) -> Result<f64> {
    non_empty(fake_scores, "fake")?;
    Ok(-fake_scores.iter().sum::<f64>() / fake_scores.len() as f64)
}

pub fn combined_ae_loss(adv: f64, rec: f64, mssd_v: f64, w: &AeLossWeights) -> f64 {
    adv + w.lambda_rec * rec + w.lambda_mssd * mssd_v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn rec_l1_examples() {
        let t = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1);
        assert_eq!(rec_l1_loss(&t, &t).unwrap(), 0.0);
        let shifted = t.map(|x| x + 1.0);
        assert!((rec_l1_loss(&shifted, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(rec_l1_loss(&t, &Tensor::zeros(4, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn rec_l1_grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = Tensor::from_vec(2, 5, noise(&mut rng, 10));
        let target = Tensor::from_vec(2, 5, noise(&mut rng, 10));
        let g = rec_l1_grad(&pred, &target).unwrap();
        let h = 1e-4;
        for i in 0..pred.len() {
            let mut p = pred.clone();
            p.data_mut()[i] += h;
            let up = rec_l1_loss(&p, &target).unwrap();
            p.data_mut()[i] -= 2.0 * h;
            let down = rec_l1_loss(&p, &target).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() <= 1e-3 * fd.abs().max(1e-8), "{fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn mssd_default_hops_skip_1024() {
        assert_eq!(MultiScaleConfig::default().hop_lens, vec![32, 64, 128, 256, 512, 2048, 4096]);
        assert!(MultiScaleConfig::with_full_octaves().hop_lens.contains(&1024));
        assert!(MultiScaleConfig::new(vec![64, 32], 4).is_err());
        assert!(MultiScaleConfig::new(vec![32, 48], 4).is_err());
    }

    #[test]
    fn mssd_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Waveform::new(noise(&mut rng, 2048), noise(&mut rng, 2048), 16000).unwrap();
        let b = Waveform::new(noise(&mut rng, 2048), noise(&mut rng, 2048), 16000).unwrap();
        let cfg = MultiScaleConfig::new(vec![16, 32, 64], 4).unwrap();
        assert_eq!(mssd(&a, &a, &cfg).unwrap(), 0.0);
        let ab = mssd(&a, &b, &cfg).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, mssd(&b, &a, &cfg).unwrap());
        let short = Waveform::silence(100, 16000);
        assert!(matches!(mssd(&a, &short, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn hinge_and_adversarial_examples() {
        assert_eq!(critic_hinge_loss(&[2.0], &[-2.0]).unwrap(), 0.0);
        assert_eq!(critic_hinge_loss(&[0.0], &[0.0]).unwrap(), 2.0);
        assert_eq!(critic_hinge_loss(&[1.0], &[-1.0]).unwrap(), 0.0);
        assert!(critic_hinge_loss(&[], &[0.0]).is_err());
        assert_eq!(generator_adv_loss(&[3.0]).unwrap(), -3.0);
        assert_eq!(generator_adv_loss(&[0.0]).unwrap(), 0.0);
        assert_eq!(generator_adv_loss(&[1.0, -1.0]).unwrap(), 0.0);
        assert!(generator_adv_loss(&[]).is_err());
    }

    #[test]
    fn combined_loss_weights() {
        let w = AeLossWeights::default();
        assert_eq!(combined_ae_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert!((combined_ae_loss(1.0, 2.0, 3.0, &w) - 51.006).abs() < 1e-12);
        let zero = AeLossWeights { lambda_rec: 0.0, lambda_mssd: 0.0 };
        assert_eq!(combined_ae_loss(-0.7, 2.0, 3.0, &zero), -0.7);
    }
}
