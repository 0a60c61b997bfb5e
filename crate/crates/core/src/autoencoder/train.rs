use std::sync::Arc;

use serde::Serialize;

use super::Autoencoder;
use crate::dsp::{StftPlan, Waveform};
use crate::error::{Error, Result};
use crate::nn::{Grads, Graph, Optimizer, OptimizerConfig, Var};
use crate::tensor::Tensor;

/// Batch-mean loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct AeLosses {
    pub total: f64,
    pub rec: f64,
    pub mssd: f64,
    pub adv: f64,
    /// Hinge loss of the critic update, when critics are enabled.
    pub critic: Option<f64>,
}

impl AeLosses {
    /// `lambda_rec * rec + lambda_mssd * mssd`, the part of the objective that
    /// does not depend on the critics.
    pub fn reconstruction(&self, model: &Autoencoder) -> f64 {
        let w = &model.config().loss_weights;
        w.lambda_rec * self.rec + w.lambda_mssd * self.mssd
    }
}

struct GenOutput {
    total: Var,
    rec: Vec<Var>,
    mssd: Vec<Var>,
    adv: Vec<Var>,
    /// Per-example reconstructed power spectrograms at the model hop.
    fake_power: Vec<[Tensor; 2]>,
}

/// Alternating generator/critic updates (1:1).
pub struct AeTrainer {
    opt: Optimizer,
    critic_opt: Option<Optimizer>,
    mssd_plans: Vec<Arc<StftPlan>>,
}

impl AeTrainer {
    pub fn new(model: &Autoencoder, lr: f64) -> Result<Self> {
        let cfg = OptimizerConfig::autoencoder(lr);
        let opt = Optimizer::for_params(cfg, model.params(), model.ae_param_ids().to_vec())?;
        let critic_opt = match model.critics() {
            Some(_) => Some(Optimizer::for_params(cfg, model.params(), model.critic_param_ids())?),
            None => None,
        };
        let mssd_plans = model.config().mssd.plans()?.into_iter().map(Arc::new).collect();
        Ok(Self { opt, critic_opt, mssd_plans })
    }

    fn prepare(model: &Autoencoder, batch: &[Waveform]) -> Result<Vec<Waveform>> {
        if batch.is_empty() {
            return Err(Error::Data("empty autoencoder batch".into()));
        }
        batch
            .iter()
            .map(|w| {
                model.check_rate(w)?;
                if w.is_empty() {
                    return Err(Error::Data("empty clip in batch".into()));
                }
                Ok(model.pad_input(w))
            })
            .collect()
    }

    fn generator(&self, model: &Autoencoder, g: &mut Graph, batch: &[Waveform]) -> GenOutput {
        let cfg = model.config();
        let eps = cfg.eps;
        let (mut rec_v, mut mssd_v, mut adv_v, mut fake_power) = (vec![], vec![], vec![], vec![]);
        let mut totals = Vec::with_capacity(batch.len());
        for w in batch {
            let s = g.input(model.log_power_input(w));
            let z = model.encode_graph(g, s);
            let dec = model.decode_graph(g, z);
            let rec = g.mean_abs_diff(dec.log_power, s);

            let mut per_channel = Vec::with_capacity(2);
            for (c, &wave) in dec.wave.iter().enumerate() {
                let mut scales = Vec::with_capacity(self.mssd_plans.len());
                for plan in &self.mssd_plans {
                    let fake = g.stft_power(wave, plan.clone());
                    let real = g.input(plan.power(w.channel(c)));
                    scales.push(g.mean_abs_diff(fake, real));
                }
                per_channel.push(g.sum_scalars(&scales));
            }
            let mssd = g.sum_scalars(&per_channel);
            let mssd = g.scale(mssd, 0.5);

            let weighted_rec = g.scale(rec, cfg.loss_weights.lambda_rec);
            let weighted_mssd = g.scale(mssd, cfg.loss_weights.lambda_mssd);
            let mut total = g.add(weighted_rec, weighted_mssd);

            if let Some(critics) = model.critics() {
                let power = dec.wave.map(|v| g.stft_power(v, model.plan().clone()));
                fake_power.push(power.map(|p| g.value(p).clone()));
                let [a, b] = critics.scores(g, power, eps);
                let sum = g.add(a, b);
                let adv = g.scale(sum, -1.0);
                total = g.add(total, adv);
                adv_v.push(adv);
            }
            rec_v.push(rec);
            mssd_v.push(mssd);
            totals.push(total);
        }
        let sum = g.sum_scalars(&totals);
        let total = g.scale(sum, 1.0 / batch.len() as f64);
        GenOutput { total, rec: rec_v, mssd: mssd_v, adv: adv_v, fake_power }
    }

    fn summarize(g: &Graph, out: &GenOutput) -> Result<AeLosses> {
        let mean = |vs: &[Var]| if vs.is_empty() { 0.0 } else { vs.iter().map(|&v| g.value(v).item()).sum::<f64>() / vs.len() as f64 };
        let losses = AeLosses {
            total: g.value(out.total).item(),
            rec: mean(&out.rec),
            mssd: mean(&out.mssd),
            adv: mean(&out.adv),
            critic: None,
        };
        if !losses.total.is_finite() {
            return Err(Error::Numeric(format!(
                "autoencoder loss is not finite (rec {}, mssd {}, adv {})",
                losses.rec, losses.mssd, losses.adv
            )));
        }
        Ok(losses)
    }

    /// Loss components and generator gradients, without updating anything.
    pub fn gradients(&self, model: &Autoencoder, batch: &[Waveform]) -> Result<(AeLosses, Grads)> {
        let batch = Self::prepare(model, batch)?;
        let mut g = Graph::new(model.params());
        let out = self.generator(model, &mut g, &batch);
        let losses = Self::summarize(&g, &out)?;
        Ok((losses, g.backward(out.total)))
    }

    pub fn evaluate(&self, model: &Autoencoder, batch: &[Waveform]) -> Result<AeLosses> {
        let batch = Self::prepare(model, batch)?;
        let mut g = Graph::new(model.params());
        let out = self.generator(model, &mut g, &batch);
        Self::summarize(&g, &out)
    }

    /// One generator update, then (with critics) one critic update on the
    /// reconstructions produced before the generator moved.
    pub fn step(&mut self, model: &mut Autoencoder, batch: &[Waveform]) -> Result<AeLosses> {
        let batch = Self::prepare(model, batch)?;
        let (mut losses, grads, fake_power) = {
            let mut g = Graph::new(model.params());
            let out = self.generator(model, &mut g, &batch);
            let losses = Self::summarize(&g, &out)?;
            (losses, g.backward(out.total), out.fake_power)
        };
        self.opt.step(model.params_mut(), &grads)?;

        if let (Some(critics), Some(opt)) = (model.critics(), self.critic_opt.as_mut()) {
            let eps = model.config().eps;
            let (loss, grads) = {
                let mut g = Graph::new(model.params());
                let mut terms = Vec::new();
                for (w, fake) in batch.iter().zip(fake_power) {
                    let real = [0, 1].map(|c| g.input(model.plan().power(w.channel(c))));
                    let fake = fake.map(|p| g.input(p));
                    for s in critics.scores(&mut g, real, eps) {
                        let neg = g.scale(s, -1.0);
                        let h = g.add_scalar(neg, 1.0);
                        terms.push(g.relu(h));
                    }
                    for s in critics.scores(&mut g, fake, eps) {
                        let h = g.add_scalar(s, 1.0);
                        terms.push(g.relu(h));
                    }
                }
                let sum = g.sum_scalars(&terms);
                let loss = g.scale(sum, 1.0 / batch.len() as f64);
                (g.value(loss).item(), g.backward(loss))
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("critic loss is not finite ({loss})")));
            }
            opt.step(model.params_mut(), &grads)?;
            losses.critic = Some(loss);
        }
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{AutoencoderConfig, SourceKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_clip(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
        let r = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
        Waveform::new(l, r, 16000).unwrap()
    }

    #[test]
    fn every_parameter_gets_gradient_at_init() {
        let cfg = AutoencoderConfig { use_critics: true, ..AutoencoderConfig::desk(SourceKind::Stem) };
        let model = Autoencoder::new(cfg, 3).unwrap();
        let trainer = AeTrainer::new(&model, 1e-3).unwrap();
        let batch = [noise_clip(1024, 1), noise_clip(1024, 2)];
        let (losses, grads) = trainer.gradients(&model, &batch).unwrap();
        assert!(losses.total.is_finite());
        for (id, g) in model.params().ids().zip(grads.iter()) {
            assert!(g.max_abs() > 0.0, "no gradient for {}", model.params().name(id));
        }
    }

    #[test]
    fn critic_step_reports_hinge_loss() {
        let cfg = AutoencoderConfig { use_critics: true, ..AutoencoderConfig::desk(SourceKind::Stem) };
        let mut model = Autoencoder::new(cfg, 4).unwrap();
        let mut trainer = AeTrainer::new(&model, 1e-3).unwrap();
        let losses = trainer.step(&mut model, &[noise_clip(512, 9)]).unwrap();
        let c = losses.critic.unwrap();
        assert!(c.is_finite() && c >= 0.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let model = Autoencoder::new(AutoencoderConfig::desk(SourceKind::Stem), 1).unwrap();
        let mut trainer = AeTrainer::new(&model, 1e-3).unwrap();
        let mut model = model;
        assert!(matches!(trainer.step(&mut model, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn loss_without_critics_is_weighted_reconstruction() {
        let model = Autoencoder::new(AutoencoderConfig::desk(SourceKind::Stem), 5).unwrap();
        let trainer = AeTrainer::new(&model, 1e-3).unwrap();
        let l = trainer.evaluate(&model, &[noise_clip(512, 3)]).unwrap();
        assert_eq!(l.adv, 0.0);
        assert!((l.total - l.reconstruction(&model)).abs() < 1e-9 * l.total.abs());
    }
}
