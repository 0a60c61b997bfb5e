use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::denoiser::{conditioning_dropout, Denoiser};
use crate::error::{Error, Result};
use crate::nn::{Graph, Optimizer, OptimizerConfig, Var};
use crate::tensor::Tensor;

/// Per-example weight `w_t` of the v-space squared error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossWeighting {
    #[default]
    Uniform,
    /// `min(snr, gamma) / (snr + 1)` with `snr = alpha^2 / beta^2`.
    MinSnr { gamma: f64 },
}

impl LossWeighting {
    pub fn weight(self, alpha: f64, beta: f64) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::MinSnr { gamma } => {
                if beta == 0.0 {
                    return 0.0;
                }
                let snr = alpha * alpha / (beta * beta);
                snr.min(gamma) / (snr + 1.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default)]
    pub weighting: LossWeighting,
    pub cond_dropout_p: f64,
    #[serde(default)]
    pub schedule: NoiseSchedule,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weighting: LossWeighting::Uniform, cond_dropout_p: 0.15, schedule: NoiseSchedule::Cosine }
    }
}

/// Batch mean of `w_t * sum((v_hat - v)^2)` with `t ~ U[0, 1]`, fresh noise and
/// conditioning dropout per example. Pairs are `(c_y, c_x)`, time-major.
pub fn diffusion_loss(
    model: &Denoiser,
    g: &mut Graph,
    batch: &[(&Tensor, &Tensor)],
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Data("empty diffusion batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for &(cy, cx) in batch {
        model.check_inputs(cy, 0.0, Some(cx))?;
        let t: f64 = rng.random();
        let (a, b) = cfg.schedule.rates(t)?;
        let eps = Tensor::from_fn(cy.rows(), cy.cols(), |_, _| StandardNormal.sample(rng));
        let z = cy.zip_map(&eps, |x, e| a * x + b * e);
        let v = cy.zip_map(&eps, |x, e| a * e - b * x);
        let cond = conditioning_dropout(cx, cfg.cond_dropout_p, rng).map(|c| g.input(c.transpose()));
        let zv = g.input(z.transpose());
        let pred = model.forward_graph(g, zv, t, cond);
        let target = g.input(v.transpose());
        let diff = g.sub(pred, target);
        let sq = g.sum_sq(diff);
        terms.push(g.scale(sq, cfg.weighting.weight(a, b)));
    }
    let sum = g.sum_scalars(&terms);
    Ok(g.scale(sum, 1.0 / batch.len() as f64))
}

/// AdamW loop state for the denoiser, with its own seeded RNG stream.
pub struct DiffusionTrainer {
    opt: Optimizer,
    loss: LossConfig,
    rng: ChaCha8Rng,
    clip_norm: Option<f64>,
}

impl DiffusionTrainer {
    pub fn new(model: &Denoiser, opt: OptimizerConfig, loss: LossConfig, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&loss.cond_dropout_p) {
            return Err(Error::Config(format!("cond_dropout_p {} outside [0, 1)", loss.cond_dropout_p)));
        }
        Ok(Self { opt: Optimizer::new(opt, model.params())?, loss, rng: ChaCha8Rng::seed_from_u64(seed), clip_norm: None })
    }

    pub fn with_clip_norm(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.opt.steps_taken()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn step(&mut self, model: &mut Denoiser, batch: &[(&Tensor, &Tensor)]) -> Result<f64> {
        let (loss, mut grads) = {
            let mut g = Graph::new(model.params());
            let l = diffusion_loss(model, &mut g, batch, &self.loss, &mut self.rng)?;
            (g.value(l).item(), g.backward(l))
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("diffusion loss is {loss} at step {}", self.opt.steps_taken() + 1)));
        }
        if let Some(m) = self.clip_norm {
            grads.clip_norm(m);
        }
        self.opt.step(model.params_mut(), &grads)?;
        Ok(loss)
    }
}
