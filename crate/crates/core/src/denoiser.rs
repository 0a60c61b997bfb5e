//! Conditional U-Net over latent sequences.
//!
//! Input is the noisy stem latent concatenated with the mix latent along the
//! channel axis; the sinusoidal timestep embedding is concatenated to the
//! feature map before every block. Output is a v-prediction with the shape of
//! the noisy input. Layout per level `l` (widths `channels[l]`):
//!
//! ```text
//! down: block(t) [attn] -> skip -> stride-2 block      (all but the last level)
//! mid:  block(t) attn block(t)
//! up:   concat(skip) block(t) [attn] -> x2 block       (all but the top level)
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    load_checkpoint, save_checkpoint, sinusoidal_embed, Checkpoint, Conv1d, ConvBlock, DpbConfig, Graph, GroupNorm, ParamStore,
    Resample, SelfAttention, Var,
};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Stem latent width (`dim_y`).
    pub in_dim: usize,
    /// Mix latent width (`dim_x`).
    pub cond_dim: usize,
    pub channel_schedule: Vec<usize>,
    /// Levels (0 = full resolution) that carry DPB self-attention.
    pub attn_levels: Vec<usize>,
    pub t_embed_dim: usize,
    pub cond_dropout_p: f64,
    pub dpb: DpbConfig,
}

impl UNetConfig {
    /// Widths (32, 64, 128), attention at the deepest level, 4 heads.
    pub fn desk(in_dim: usize, cond_dim: usize) -> Self {
        Self {
            in_dim,
            cond_dim,
            channel_schedule: vec![32, 64, 128],
            attn_levels: vec![2],
            t_embed_dim: 16,
            cond_dropout_p: 0.15,
            dpb: DpbConfig::default(),
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_schedule.len()
    }

    /// Sequence lengths must be multiples of this.
    pub fn length_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.cond_dim == 0 {
            return Err(Error::Config("latent widths must be positive".into()));
        }
        if self.channel_schedule.is_empty() || self.channel_schedule.contains(&0) {
            return Err(Error::Config("channel schedule needs at least one positive width".into()));
        }
        if let Some(&l) = self.attn_levels.iter().find(|&&l| l >= self.levels()) {
            return Err(Error::Config(format!("attention level {l} does not exist")));
        }
        for &l in &self.attn_levels {
            if !self.channel_schedule[l].is_multiple_of(self.dpb.heads) {
                return Err(Error::Config(format!("level {l} width is not divisible by {} heads", self.dpb.heads)));
            }
        }
        if self.t_embed_dim == 0 || !self.t_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("t_embed_dim must be even and positive".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_p) {
            return Err(Error::Config(format!("cond_dropout_p {} outside [0, 1)", self.cond_dropout_p)));
        }
        self.dpb.validate()
    }
}

/// Returns `None` (drop, train unconditionally) with probability `p`.
pub fn conditioning_dropout<'a, T>(c: &'a T, p: f64, rng: &mut impl Rng) -> Option<&'a T> {
    if rng.random::<f64>() < p {
        None
    } else {
        Some(c)
    }
}

#[derive(Clone, Debug)]
struct Level {
    block: ConvBlock,
    attn: Option<SelfAttention>,
}

pub struct Denoiser {
    config: UNetConfig,
    params: ParamStore,
    conv_in: Conv1d,
    down: Vec<Level>,
    downsample: Vec<ConvBlock>,
    mid: (ConvBlock, SelfAttention, ConvBlock),
    up: Vec<Level>,
    upsample: Vec<ConvBlock>,
    norm_out: GroupNorm,
    conv_out: Conv1d,
}

impl std::fmt::Debug for Denoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Denoiser").field("config", &self.config).field("params", &self.params.num_scalars()).finish()
    }
}

impl Denoiser {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &mut ParamStore::new();
        let ch = &config.channel_schedule;
        let te = config.t_embed_dim;
        let n = config.levels();
        let attn = |p: &mut ParamStore, name: String, l: usize, rng: &mut ChaCha8Rng| -> Result<Option<SelfAttention>> {
            match config.attn_levels.contains(&l) {
                true => Ok(Some(SelfAttention::new(p, &name, ch[l], config.dpb, rng)?)),
                false => Ok(None),
            }
        };

        let conv_in = Conv1d::new(p, "in", (config.in_dim + config.cond_dim, ch[0]), 3, 1, 1.0, &mut rng);
        let mut down = Vec::with_capacity(n);
        let mut downsample = Vec::with_capacity(n - 1);
        let mut width = ch[0];
        for l in 0..n {
            let block = ConvBlock::normed(p, &format!("down{l}.block"), (width, ch[l]), te, Resample::None, &mut rng);
            down.push(Level { block, attn: attn(p, format!("down{l}.attn"), l, &mut rng)? });
            width = ch[l];
            if l + 1 < n {
                downsample.push(ConvBlock::normed(p, &format!("down{l}.resample"), (width, width), 0, Resample::Down, &mut rng));
            }
        }
        let deep = ch[n - 1];
        let mid = (
            ConvBlock::normed(p, "mid.block0", (deep, deep), te, Resample::None, &mut rng),
            SelfAttention::new(p, "mid.attn", deep, config.dpb, &mut rng)?,
            ConvBlock::normed(p, "mid.block1", (deep, deep), te, Resample::None, &mut rng),
        );
        let mut up = Vec::with_capacity(n);
        let mut upsample = Vec::with_capacity(n - 1);
        for l in (0..n).rev() {
            let block = ConvBlock::normed(p, &format!("up{l}.block"), (2 * ch[l], ch[l]), te, Resample::None, &mut rng);
            up.push(Level { block, attn: attn(p, format!("up{l}.attn"), l, &mut rng)? });
            if l > 0 {
                upsample.push(ConvBlock::normed(p, &format!("up{l}.resample"), (ch[l], ch[l - 1]), 0, Resample::Up, &mut rng));
            }
        }
        let norm_out = GroupNorm::new(p, "out.norm", ch[0]);
        let conv_out = Conv1d::new(p, "out", (ch[0], config.in_dim), 3, 1, 0.1, &mut rng);
        let params = std::mem::take(p);
        Ok(Self { config, params, conv_in, down, downsample, mid, up, upsample, norm_out, conv_out })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn check_inputs(&self, z: &Tensor, t: f64, cond: Option<&Tensor>) -> Result<()> {
        let (n, d) = z.shape();
        if d != self.config.in_dim {
            return Err(Error::Shape(format!("noisy latent has dim {d}, denoiser expects {}", self.config.in_dim)));
        }
        let m = self.config.length_multiple();
        if n == 0 || n % m != 0 {
            return Err(Error::Shape(format!("latent length {n} is not a positive multiple of {m}")));
        }
        if let Some(c) = cond {
            if c.rows() != n {
                return Err(Error::Shape(format!("conditioning has {} steps, noisy latent has {n}", c.rows())));
            }
            if c.cols() != self.config.cond_dim {
                return Err(Error::Shape(format!("conditioning dim {}, expected {}", c.cols(), self.config.cond_dim)));
            }
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("timestep {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Graph forward on `channels x N` maps. `cond = None` is the
    /// unconditional branch (zeros).
    pub fn forward_graph(&self, g: &mut Graph, z: Var, t: f64, cond: Option<Var>) -> Var {
        let n = g.shape(z).1;
        let cond = cond.unwrap_or_else(|| g.input(Tensor::zeros(self.config.cond_dim, n)));
        let temb = sinusoidal_embed(t, self.config.t_embed_dim).expect("t_embed_dim validated even");
        let temb = g.input(Tensor::column(&temb));

        let x = g.concat_rows(&[z, cond]);
        let mut h = self.conv_in.forward(g, x);
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, lvl) in self.down.iter().enumerate() {
            h = lvl.block.forward(g, h, Some(temb));
            if let Some(a) = &lvl.attn {
                h = a.forward(g, h);
            }
            skips.push(h);
            if let Some(ds) = self.downsample.get(l) {
                h = ds.forward(g, h, None);
            }
        }
        h = self.mid.0.forward(g, h, Some(temb));
        h = self.mid.1.forward(g, h);
        h = self.mid.2.forward(g, h, Some(temb));
        for (i, lvl) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat_rows(&[h, skip]);
            h = lvl.block.forward(g, cat, Some(temb));
            if let Some(a) = &lvl.attn {
                h = a.forward(g, h);
            }
            if let Some(us) = self.upsample.get(i) {
                h = us.forward(g, h, None);
            }
        }
        let h = self.norm_out.forward(g, h);
        let h = g.silu(h);
        self.conv_out.forward(g, h)
    }

    /// v-prediction for time-major latents (`N x dim_y`, `N x dim_x`).
    pub fn predict(&self, z: &Tensor, t: f64, cond: Option<&Tensor>) -> Result<Tensor> {
        self.check_inputs(z, t, cond)?;
        let mut g = Graph::new(&self.params);
        let zv = g.input(z.transpose());
        let cv = cond.map(|c| g.input(c.transpose()));
        let out = self.forward_graph(&mut g, zv, t, cv);
        let v = g.value(out).transpose();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("denoiser produced non-finite output at t = {t}")));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let cfg = serde_json::to_value(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        save_checkpoint(path, CHECKPOINT_KIND, &cfg, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("checkpoint holds a {}, not a denoiser", ck.kind)));
        }
        let config: UNetConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::Format(format!("denoiser config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        model.params.load_from(&ck.params)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn desk_model_fits_budget() {
        let d = Denoiser::new(UNetConfig::desk(8, 8), 0).unwrap();
        assert!(d.num_params() < 1_000_000, "{} params", d.num_params());
    }

    #[test]
    fn output_matches_input_shape_at_any_length() {
        let d = Denoiser::new(UNetConfig::desk(4, 6), 1).unwrap();
        for n in [4, 8, 64] {
            let z = randn(n, 4, 2);
            let c = randn(n, 6, 3);
            let v = d.predict(&z, 0.3, Some(&c)).unwrap();
            assert_eq!(v.shape(), (n, 4));
        }
    }

    #[test]
    fn absent_conditioning_equals_zero_conditioning() {
        let d = Denoiser::new(UNetConfig::desk(4, 6), 1).unwrap();
        let z = randn(8, 4, 2);
        let a = d.predict(&z, 0.7, None).unwrap();
        let b = d.predict(&z, 0.7, Some(&Tensor::zeros(8, 6))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors() {
        let d = Denoiser::new(UNetConfig::desk(4, 6), 1).unwrap();
        assert!(matches!(d.predict(&randn(6, 4, 0), 0.5, None), Err(Error::Shape(_))));
        assert!(matches!(d.predict(&randn(8, 4, 0), 0.5, Some(&randn(4, 6, 0))), Err(Error::Shape(_))));
        assert!(matches!(d.predict(&randn(8, 3, 0), 0.5, None), Err(Error::Shape(_))));
        assert!(UNetConfig { attn_levels: vec![3], ..UNetConfig::desk(4, 6) }.validate().is_err());
        assert!(UNetConfig { cond_dropout_p: 1.0, ..UNetConfig::desk(4, 6) }.validate().is_err());
    }

    #[test]
    fn dropout_frequency_and_determinism() {
        let c = 1u8;
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10_000).map(|_| conditioning_dropout(&c, 0.15, &mut rng).is_none()).collect::<Vec<_>>()
        };
        let a = draw(11);
        let frac = a.iter().filter(|&&d| d).count() as f64 / a.len() as f64;
        assert!((0.13..=0.17).contains(&frac), "{frac}");
        assert_eq!(a, draw(11));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| conditioning_dropout(&c, 0.0, &mut rng).is_some()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let d = Denoiser::new(UNetConfig::desk(4, 6), 9).unwrap();
        d.save(&path).unwrap();
        let back = Denoiser::load(&path).unwrap();
        let z = randn(8, 4, 5);
        let (a, b) = (d.predict(&z, 0.2, None).unwrap(), back.predict(&z, 0.2, None).unwrap());
        assert!(a.zip_map(&b, |x, y| (x - y).abs()).max_abs() < 1e-3);
    }
}
