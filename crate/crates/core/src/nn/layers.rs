use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved `[sin, cos]` pairs of `1000 t` at geometrically spaced
/// frequencies from 1 down to 1/10000.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let angle = 1000.0 * t * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// 1-D convolution with "same" padding (odd kernels).
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    /// He-normal weights scaled by `gain`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = gain * (2.0 / (cin * kernel) as f64).sqrt();
        let w = store.add_normal(format!("{name}.w"), cout, cin * kernel, std, rng);
        let b = store.add_zeros(format!("{name}.b"), cout, 1);
        Self { w, b, cin, cout, kernel, stride }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv1d(x, w, b, self.kernel, self.stride, self.kernel / 2)
    }
}

/// Group normalization with a per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    /// Up to 8 groups, as many as divide `channels`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let groups = [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(channels, 1, 1.0));
        let beta = store.add_zeros(format!("{name}.beta"), channels, 1);
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let len = g.shape(x).1;
        let y = g.group_norm(x, self.groups, Self::EPS);
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let scale = g.repeat_cols(gamma, len);
        let y = g.mul(y, scale);
        g.add_col(y, beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resample {
    None,
    /// Stride-2 convolution on the residual path, pairwise average on the skip path.
    Down,
    /// Nearest-neighbour x2 before both paths.
    Up,
}

/// Residual block: `skip(x) + conv_b(silu(conv_a(silu([x; cond]))))`.
///
/// An optional conditioning column (`cond_dim x 1`) is broadcast along time
/// and concatenated to the block input. Blocks built with
/// [`ConvBlock::normed`] apply group norm before each activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv_a: Conv1d,
    pub conv_b: Conv1d,
    pub skip: Option<Conv1d>,
    pub resample: Resample,
    pub cond_dim: usize,
    pub norms: Option<(GroupNorm, GroupNorm)>,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (cin, cout): (usize, usize),
        cond_dim: usize,
        resample: Resample,
        rng: &mut impl Rng,
    ) -> Self {
        let stride = if resample == Resample::Down { 2 } else { 1 };
        let conv_a = Conv1d::new(store, &format!("{name}.conv_a"), (cin + cond_dim, cout), 3, stride, 1.0, rng);
        let conv_b = Conv1d::new(store, &format!("{name}.conv_b"), (cout, cout), 3, 1, 0.5, rng);
        let skip = (cin != cout).then(|| Conv1d::new(store, &format!("{name}.skip"), (cin, cout), 1, 1, 1.0, rng));
        Self { conv_a, conv_b, skip, resample, cond_dim, norms: None }
    }

    pub fn normed(
        store: &mut ParamStore,
        name: &str,
        (cin, cout): (usize, usize),
        cond_dim: usize,
        resample: Resample,
        rng: &mut impl Rng,
    ) -> Self {
        let mut block = Self::new(store, name, (cin, cout), cond_dim, resample, rng);
        block.norms = Some((GroupNorm::new(store, &format!("{name}.norm_a"), cin), GroupNorm::new(store, &format!("{name}.norm_b"), cout)));
        block
    }

    pub fn forward(&self, g: &mut Graph, x: Var, cond: Option<Var>) -> Var {
        let x = if self.resample == Resample::Up { g.upsample2(x) } else { x };
        let h = match &self.norms {
            Some((n, _)) => n.forward(g, x),
            None => x,
        };
        let mut h = g.silu(h);
        if let Some(c) = cond {
            assert_eq!(g.shape(c).0, self.cond_dim, "conditioning width");
            let len = g.shape(h).1;
            let rep = g.repeat_cols(c, len);
            h = g.concat_rows(&[h, rep]);
        }
        let h = self.conv_a.forward(g, h);
        let h = match &self.norms {
            Some((_, n)) => n.forward(g, h),
            None => h,
        };
        let h = g.silu(h);
        let h = self.conv_b.forward(g, h);
        let s = if self.resample == Resample::Down { g.avg_pool2(x) } else { x };
        let s = match &self.skip {
            Some(p) => p.forward(g, s),
            None => s,
        };
        g.add(s, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpbConfig {
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    pub heads: usize,
}

impl Default for DpbConfig {
    fn default() -> Self {
        Self { mlp_hidden: 64, mlp_layers: 2, heads: 4 }
    }
}

impl DpbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mlp_hidden == 0 || self.mlp_layers == 0 || self.heads == 0 {
            return Err(Error::Config(format!("DPB sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Relative-position bias `B[i][j] = MLP(i - j)`, one output per head.
/// The MLP reads the raw integer offset, so any sequence length works.
#[derive(Clone, Debug)]
pub struct DynamicPositionBias {
    pub layers: Vec<(ParamId, ParamId)>,
    pub heads: usize,
}

impl DynamicPositionBias {
    pub fn new(store: &mut ParamStore, name: &str, cfg: DpbConfig, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut width = 1;
        for i in 0..cfg.mlp_layers {
            let std = if i == 0 { 0.05 } else { (2.0 / width as f64).sqrt() };
            let w = store.add_normal(format!("{name}.mlp{i}.w"), cfg.mlp_hidden, width, std, rng);
            let b = store.add_normal(format!("{name}.mlp{i}.b"), cfg.mlp_hidden, 1, 0.5, rng);
            layers.push((w, b));
            width = cfg.mlp_hidden;
        }
        let w = store.add_normal(format!("{name}.out.w"), cfg.heads, width, 0.02, rng);
        let b = store.add_zeros(format!("{name}.out.b"), cfg.heads, 1);
        layers.push((w, b));
        Self { layers, heads: cfg.heads }
    }

    /// `heads x (lq + lk - 1)` table; column `d` holds offset `d - (lk - 1)`.
    pub fn table(&self, g: &mut Graph, lq: usize, lk: usize) -> Var {
        let n = lq + lk - 1;
        let offsets = Tensor::from_fn(1, n, |_, d| d as f64 - (lk as f64 - 1.0));
        let mut h = g.input(offsets);
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(w), g.param(b));
            let z = g.matmul(w, h);
            h = g.add_col(z, b);
            if i < last {
                h = g.relu(h);
            }
        }
        h
    }

    /// Per-head `lq x lk` bias matrices.
    pub fn bias(&self, g: &mut Graph, lq: usize, lk: usize) -> Vec<Var> {
        let table = self.table(g, lq, lk);
        (0..self.heads).map(|h| g.toeplitz(table, h, lq, lk)).collect()
    }
}

/// `softmax(q k^T / sqrt(d) + bias) v` for `L x d` inputs.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, bias: Option<Var>) -> Var {
    let d = g.shape(q).1;
    assert_eq!(g.shape(k).1, d, "q/k width mismatch");
    assert_eq!(g.shape(k).0, g.shape(v).0, "k/v length mismatch");
    let scores = g.matmul_nt(q, k);
    let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        scores = g.add(scores, b);
    }
    let weights = g.softmax_rows(scores);
    g.matmul(weights, v)
}

/// Multi-head self-attention over a `channels x L` map with DPB, residual.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dpb: DynamicPositionBias,
    pub channels: usize,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, dpb: DpbConfig, rng: &mut impl Rng) -> Result<Self> {
        dpb.validate()?;
        if !channels.is_multiple_of(dpb.heads) {
            return Err(Error::Config(format!("{channels} channels do not split into {} heads", dpb.heads)));
        }
        let std = (1.0 / channels as f64).sqrt();
        Ok(Self {
            wq: store.add_normal(format!("{name}.wq"), channels, channels, std, rng),
            wk: store.add_normal(format!("{name}.wk"), channels, channels, std, rng),
            wv: store.add_normal(format!("{name}.wv"), channels, channels, std, rng),
            wo: store.add_normal(format!("{name}.wo"), channels, channels, 0.5 * std, rng),
            dpb: DynamicPositionBias::new(store, &format!("{name}.dpb"), dpb, rng),
            channels,
            heads: dpb.heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let len = g.shape(x).1;
        let d = self.channels / self.heads;
        let xt = g.transpose(x);
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(xt, wq);
        let k = g.matmul(xt, wk);
        let v = g.matmul(xt, wv);
        let biases = self.dpb.bias(g, len, len);
        let mut heads = Vec::with_capacity(self.heads);
        for (h, &b) in biases.iter().enumerate() {
            let qh = g.slice_cols(q, h * d, d);
            let kh = g.slice_cols(k, h * d, d);
            let vh = g.slice_cols(v, h * d, d);
            heads.push(attention(g, qh, kh, vh, Some(b)));
        }
        let cat = g.concat_cols(&heads);
        let o = g.matmul(cat, wo);
        let o = g.transpose(o);
        g.add(x, o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn embedding_at_zero_and_distinctness() {
        let e = sinusoidal_embed(0.0, 16).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
        assert!(sinusoidal_embed(0.5, 7).is_err());
        assert_eq!(sinusoidal_embed(0.3, 128).unwrap().len(), 128);

        let grid: Vec<Vec<f64>> = (0..64).map(|i| sinusoidal_embed(i as f64 / 63.0, 32).unwrap()).collect();
        for i in 0..64 {
            for j in i + 1..64 {
                let d: f64 = grid[i].iter().zip(&grid[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d.sqrt() > 1e-3, "t grid points {i} and {j} collide");
            }
        }
    }

    #[test]
    fn dpb_is_toeplitz_and_length_extensible() {
        let mut store = ParamStore::new();
        let dpb = DynamicPositionBias::new(&mut store, "dpb", DpbConfig::default(), &mut rng());
        let mut g = Graph::new(&store);
        let small = dpb.bias(&mut g, 64, 64);
        let large = dpb.bias(&mut g, 256, 256);
        for h in 0..4 {
            let (s, l) = (g.value(small[h]), g.value(large[h]));
            for i in 0..63 {
                for j in 0..63 {
                    assert_eq!(s.get(i + 1, j + 1), s.get(i, j));
                }
            }
            for i in 0..64 {
                for j in 0..64 {
                    assert_eq!(s.get(i, j), l.get(i, j));
                }
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_constant_bias_and_unchanged_attention() {
        let mut store = ParamStore::new();
        let dpb = DynamicPositionBias::new(&mut store, "dpb", DpbConfig::default(), &mut rng());
        let out_w = *dpb.layers.last().map(|(w, _)| w).unwrap();
        *store.get_mut(out_w) = Tensor::zeros(4, 64);
        let out_b = dpb.layers.last().unwrap().1;
        *store.get_mut(out_b) = Tensor::filled(4, 1, 0.7);

        let mut g = Graph::new(&store);
        let b = dpb.bias(&mut g, 5, 5)[0];
        assert!(g.value(b).data().iter().all(|&x| x == 0.7));

        let q = g.input(Tensor::from_fn(5, 8, |r, c| (r + c) as f64 * 0.1));
        let k = g.input(Tensor::from_fn(5, 8, |r, c| (r * c) as f64 * 0.05));
        let v = g.input(Tensor::from_fn(5, 8, |r, c| (r as f64 - c as f64).cos()));
        let with = attention(&mut g, q, k, v, Some(b));
        let without = attention(&mut g, q, k, v, None);
        for (a, b) in g.value(with).data().iter().zip(g.value(without).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_trivial_cases() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v1 = Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let (q, k, v) = (g.input(Tensor::filled(1, 3, 4.0)), g.input(Tensor::filled(1, 3, -1.0)), g.input(v1.clone()));
        let out = attention(&mut g, q, k, v, None);
        assert_eq!(g.value(out), &v1);

        let vals = Tensor::from_fn(4, 2, |r, c| (r * 2 + c) as f64);
        let q = g.input(Tensor::zeros(4, 2));
        let k = g.input(Tensor::from_fn(4, 2, |r, c| (r + c) as f64));
        let v = g.input(vals.clone());
        let b = g.input(Tensor::zeros(4, 4));
        let out = attention(&mut g, q, k, v, Some(b));
        let mean = vals.transpose().row_means();
        for r in 0..4 {
            for c in 0..2 {
                assert!((g.value(out).get(r, c) - mean.get(c, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_block_shapes_and_identity_residual() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let same = ConvBlock::new(&mut store, "a", (4, 4), 0, Resample::None, &mut r);
        let down = ConvBlock::new(&mut store, "b", (4, 4), 3, Resample::Down, &mut r);
        let up = ConvBlock::new(&mut store, "c", (4, 6), 0, Resample::Up, &mut r);
        for blk in [&same, &down] {
            *store.get_mut(blk.conv_b.w) = Tensor::zeros(4, 12);
        }
        let x0 = Tensor::from_fn(4, 16, |r, c| ((r * 16 + c) as f64).sin());
        let mut g = Graph::new(&store);
        let x = g.input(x0.clone());
        let cond = g.input(Tensor::filled(3, 1, 0.3));
        let y = same.forward(&mut g, x, None);
        assert_eq!(g.value(y), &x0);
        let yd = down.forward(&mut g, x, Some(cond));
        assert_eq!(g.shape(yd), (4, 8));
        for c in 0..8 {
            assert!((g.value(yd).get(1, c) - 0.5 * (x0.get(1, 2 * c) + x0.get(1, 2 * c + 1))).abs() < 1e-15);
        }
        let yu = up.forward(&mut g, x, None);
        assert_eq!(g.shape(yu), (6, 32));
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut store = ParamStore::new();
        assert!(SelfAttention::new(&mut store, "a", 10, DpbConfig::default(), &mut rng()).is_err());
    }
}
