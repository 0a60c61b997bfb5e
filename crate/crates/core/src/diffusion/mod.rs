//! Noise schedule, v-parameterization, guidance and style grounding.
//!
//! Latents are time-major `N x D` tensors throughout.

mod sampler;
mod train;

use serde::{Deserialize, Serialize};

pub use sampler::{sample, sample_from, t_grid, GaussianOracle, SamplerConfig, VPredictor};
pub use train::{diffusion_loss, DiffusionTrainer, LossConfig, LossWeighting};

use crate::autoencoder::LatentSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSchedule {
    /// `alpha = cos(pi t / 2)`, `beta = sin(pi t / 2)`.
    #[default]
    Cosine,
}

impl NoiseSchedule {
    /// `(alpha_t, beta_t)`; `t` must lie in `[0, 1]`.
    pub fn rates(self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("timestep {t} outside [0, 1]")));
        }
        Ok(self.rates_unchecked(t))
    }

    pub(crate) fn rates_unchecked(self, t: f64) -> (f64, f64) {
        match self {
            NoiseSchedule::Cosine => {
                // exact endpoints rather than cos(pi/2) ~ 6e-17
                if t == 1.0 {
                    return (0.0, 1.0);
                }
                let a = std::f64::consts::FRAC_PI_2 * t;
                (a.cos(), a.sin())
            }
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `z_t = alpha c + beta eps`.
pub fn add_noise(c: &Tensor, eps: &Tensor, t: f64, schedule: NoiseSchedule) -> Result<Tensor> {
    same_shape(c, eps, "add_noise")?;
    let (a, b) = schedule.rates(t)?;
    Ok(c.zip_map(eps, |x, e| a * x + b * e))
}

/// `v = alpha eps - beta c`.
pub fn v_target(c: &Tensor, eps: &Tensor, t: f64, schedule: NoiseSchedule) -> Result<Tensor> {
    same_shape(c, eps, "v_target")?;
    let (a, b) = schedule.rates(t)?;
    Ok(c.zip_map(eps, |x, e| a * e - b * x))
}

/// `c_hat = alpha z - beta v`.
pub fn x_from_v(z: &Tensor, v: &Tensor, t: f64, schedule: NoiseSchedule) -> Result<Tensor> {
    same_shape(z, v, "x_from_v")?;
    let (a, b) = schedule.rates(t)?;
    Ok(z.zip_map(v, |z, v| a * z - b * v))
}

/// `eps_hat = beta z + alpha v`.
pub fn eps_from_v(z: &Tensor, v: &Tensor, t: f64, schedule: NoiseSchedule) -> Result<Tensor> {
    same_shape(z, v, "eps_from_v")?;
    let (a, b) = schedule.rates(t)?;
    Ok(z.zip_map(v, |z, v| b * z + a * v))
}

/// Deterministic DDIM update from `t_k` to `t_km1 <= t_k`.
pub fn ddim_step(z: &Tensor, v_hat: &Tensor, t_k: f64, t_km1: f64, schedule: NoiseSchedule) -> Result<Tensor> {
    if t_km1 > t_k {
        return Err(Error::Config(format!("DDIM step must go backwards in time: {t_k} -> {t_km1}")));
    }
    let x = x_from_v(z, v_hat, t_k, schedule)?;
    let e = eps_from_v(z, v_hat, t_k, schedule)?;
    ddim_reproject(&x, &e, t_km1, schedule)
}

fn ddim_reproject(x: &Tensor, e: &Tensor, t: f64, schedule: NoiseSchedule) -> Result<Tensor> {
    let (a, b) = schedule.rates(t)?;
    Ok(x.zip_map(e, |x, e| a * x + b * e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgConvention {
    /// `cond + lambda (uncond - cond)`.
    #[default]
    PaperPrinted,
    /// `uncond + lambda (cond - uncond)`.
    Standard,
}

impl std::str::FromStr for CfgConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" | "paper_printed" => Ok(Self::PaperPrinted),
            "standard" => Ok(Self::Standard),
            _ => Err(Error::Config(format!("unknown guidance convention {s:?} (expected paper or standard)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda_cfg: f64,
    pub phi: f64,
    #[serde(default)]
    pub convention: CfgConvention,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lambda_cfg: 0.0, phi: 0.0, convention: CfgConvention::PaperPrinted }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::Config(format!("phi {} outside [0, 1]", self.phi)));
        }
        if !self.lambda_cfg.is_finite() {
            return Err(Error::Config("guidance weight must be finite".into()));
        }
        Ok(())
    }

    /// Whether the unconditional branch changes the result.
    pub fn needs_uncond(&self) -> bool {
        match self.convention {
            CfgConvention::PaperPrinted => self.lambda_cfg != 0.0,
            CfgConvention::Standard => self.lambda_cfg != 1.0,
        }
    }
}

/// Paper form `cond + lambda (uncond - cond)`; standard form
/// `uncond + lambda (cond - uncond)`, evaluated as
/// `cond + (lambda - 1)(cond - uncond)` so `lambda = 1` returns `cond` exactly.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, lambda: f64, convention: CfgConvention) -> Result<Tensor> {
    same_shape(cond, uncond, "cfg_combine")?;
    Ok(match convention {
        CfgConvention::PaperPrinted => cond.zip_map(uncond, |c, u| c + lambda * (u - c)),
        CfgConvention::Standard => cond.zip_map(uncond, |c, u| c + (lambda - 1.0) * (c - u)),
    })
}

/// Blend of `guided` and `guided` rescaled to the standard deviation of
/// `reference`. Zero-variance `guided` is returned unchanged.
pub fn cfg_rescale(guided: &Tensor, reference: &Tensor, phi: f64) -> Result<Tensor> {
    same_shape(guided, reference, "cfg_rescale")?;
    let sg = guided.std();
    if sg == 0.0 {
        return Ok(guided.clone());
    }
    let k = phi * reference.std() / sg + (1.0 - phi);
    Ok(guided.scaled(k))
}

/// Per-dimension time mean of a reference latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleVector {
    pub mean: Vec<f64>,
}

impl StyleVector {
    pub fn new(mean: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("style vector must be non-empty and finite".into()));
        }
        Ok(Self { mean })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Column means of an `N x D` latent.
pub fn time_mean(c: &Tensor) -> Vec<f64> {
    c.transpose().row_means().into_vec()
}

pub fn style_vector(c: &LatentSequence) -> Result<StyleVector> {
    StyleVector::new(time_mean(c.vectors()))
}

/// `c + beta^2 (style - time_mean(c))`, broadcast over timesteps.
pub fn style_ground(c: &Tensor, style: &StyleVector, beta: f64) -> Result<Tensor> {
    if c.cols() != style.dim() {
        return Err(Error::Shape(format!("style dim {} vs latent dim {}", style.dim(), c.cols())));
    }
    if beta == 0.0 {
        return Ok(c.clone());
    }
    let w = beta * beta;
    let shift: Vec<f64> = time_mean(c).iter().zip(&style.mean).map(|(m, s)| w * (s - m)).collect();
    Ok(Tensor::from_fn(c.rows(), c.cols(), |r, d| c.get(r, d) + shift[d]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(rows, cols, f)
    }

    #[test]
    fn schedule_endpoints_and_range() {
        let s = NoiseSchedule::Cosine;
        assert_eq!(s.rates(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(s.rates(1.0).unwrap(), (0.0, 1.0));
        let (a, b) = s.rates(0.5).unwrap();
        assert!((a - 0.5f64.sqrt()).abs() < 1e-15 && (b - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(s.rates(-0.1).is_err() && s.rates(1.01).is_err());
    }

    #[test]
    fn v_param_endpoints() {
        let s = NoiseSchedule::Cosine;
        let x = t(3, 2, |r, c| r as f64 - c as f64);
        let e = t(3, 2, |r, c| (r * c) as f64 + 0.5);
        assert_eq!(v_target(&x, &e, 0.0, s).unwrap(), e);
        let v1 = v_target(&x, &e, 1.0, s).unwrap();
        assert_eq!(v1, x.scaled(-1.0));
        assert_eq!(x_from_v(&e, &v1, 1.0, s).unwrap(), v1.scaled(-1.0));
        assert_eq!(add_noise(&x, &e, 0.0, s).unwrap(), x);
        assert_eq!(add_noise(&x, &e, 1.0, s).unwrap(), e);
    }

    proptest! {
        #[test]
        fn v_round_trip(tt in 0.0f64..=1.0, vals in prop::collection::vec(-3.0f64..3.0, 12)) {
            let s = NoiseSchedule::Cosine;
            let x = Tensor::from_vec(3, 2, vals[..6].to_vec());
            let e = Tensor::from_vec(3, 2, vals[6..].to_vec());
            let z = add_noise(&x, &e, tt, s).unwrap();
            let v = v_target(&x, &e, tt, s).unwrap();
            let xr = x_from_v(&z, &v, tt, s).unwrap();
            let er = eps_from_v(&z, &v, tt, s).unwrap();
            for (a, b) in xr.data().iter().zip(x.data()).chain(er.data().iter().zip(e.data())) {
                prop_assert!((a - b).abs() < 1e-14);
            }
        }

        #[test]
        fn grounding_preserves_centered_residual(beta in 0.0f64..=1.0, vals in prop::collection::vec(-2.0f64..2.0, 15)) {
            let c = Tensor::from_vec(5, 3, vals);
            let style = StyleVector::new(vec![0.3, -1.0, 2.0]).unwrap();
            let g = style_ground(&c, &style, beta).unwrap();
            let (mc, mg) = (time_mean(&c), time_mean(&g));
            for r in 0..5 {
                for d in 0..3 {
                    prop_assert!(((g.get(r, d) - mg[d]) - (c.get(r, d) - mc[d])).abs() < 1e-12);
                }
            }
            for d in 0..3 {
                let expect = (1.0 - beta * beta) * mc[d] + beta * beta * style.mean[d];
                prop_assert!((mg[d] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ddim_identity_and_order() {
        let s = NoiseSchedule::Cosine;
        let z = t(2, 2, |r, c| (r + 2 * c) as f64 * 0.3);
        let v = t(2, 2, |r, c| (r as f64 - c as f64) * 0.7);
        let same = ddim_step(&z, &v, 0.4, 0.4, s).unwrap();
        for (a, b) in same.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ddim_step(&z, &v, 0.4, 0.6, s).is_err());
    }

    #[test]
    fn cfg_examples() {
        let c = Tensor::filled(1, 2, 1.0);
        let u = Tensor::filled(1, 2, 3.0);
        assert_eq!(cfg_combine(&c, &u, 0.0, CfgConvention::PaperPrinted).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.5, CfgConvention::PaperPrinted).unwrap(), Tensor::filled(1, 2, 2.0));
        assert_eq!(cfg_combine(&c, &u, 1.0, CfgConvention::Standard).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 2.0, CfgConvention::Standard).unwrap(), Tensor::filled(1, 2, -1.0));
        for conv in [CfgConvention::PaperPrinted, CfgConvention::Standard] {
            assert_eq!(cfg_combine(&c, &c, 7.5, conv).unwrap(), c);
        }
        assert_eq!("paper".parse::<CfgConvention>().unwrap(), CfgConvention::PaperPrinted);
        assert!("other".parse::<CfgConvention>().is_err());
    }

    #[test]
    fn rescale_examples() {
        // zero-mean arrays with std 2 and 1
        let guided = Tensor::from_vec(1, 4, vec![2.0, -2.0, 2.0, -2.0]);
        let reference = Tensor::from_vec(1, 4, vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(cfg_rescale(&guided, &reference, 0.0).unwrap(), guided);
        assert!((cfg_rescale(&guided, &reference, 1.0).unwrap().std() - 1.0).abs() < 1e-12);
        assert!((cfg_rescale(&guided, &reference, 0.5).unwrap().std() - 1.5).abs() < 1e-12);
        let flat = Tensor::filled(1, 4, 3.0);
        assert_eq!(cfg_rescale(&flat, &reference, 1.0).unwrap(), flat);
    }

    #[test]
    fn style_examples() {
        let seq = |rows: Vec<f64>| LatentSequence::new(Tensor::from_vec(rows.len(), 1, rows), 256, crate::autoencoder::SourceKind::Stem).unwrap();
        assert_eq!(style_vector(&seq(vec![0.0, 2.0])).unwrap().mean, vec![1.0]);
        assert_eq!(style_vector(&seq(vec![4.5])).unwrap().mean, vec![4.5]);
        let c = t(4, 2, |r, d| (r * 3 + d) as f64 * 0.1);
        let style = StyleVector::new(vec![5.0, -5.0]).unwrap();
        assert_eq!(style_ground(&c, &style, 0.0).unwrap(), c);
        let full = style_ground(&c, &style, 1.0).unwrap();
        for (m, s) in time_mean(&full).iter().zip(&style.mean) {
            assert!((m - s).abs() < 1e-12);
        }
        assert!(style_ground(&c, &StyleVector::new(vec![1.0]).unwrap(), 0.5).is_err());
    }
}
