//! Evaluation metrics: Fréchet distance over self-computed features, style
//! distances, and rule-based conditional coherence.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::dsp::{mel_from_power, MelFilterbank, StftConfig, StftPlan, Waveform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MELS: usize = 64;
const RIDGE: f64 = 1e-6;

/// Per-band mean and std of a 64-band log-mel spectrogram, averaged over
/// channels (128 values).
pub fn mel_features(w: &Waveform) -> Result<Vec<f64>> {
    let hop = if w.sample_rate() >= 32_000 { 256 } else { 128 };
    let cfg = StftConfig::with_hop(hop)?;
    let plan = StftPlan::new(cfg)?;
    let fb = MelFilterbank::new(w.sample_rate(), cfg.win_len, FEATURE_MELS)?;
    let mut feats = vec![0.0; 2 * FEATURE_MELS];
    for c in 0..2 {
        let power = plan.power(w.channel(c)).transpose();
        let mel = mel_from_power(&power, &fb, cfg.eps)?;
        let stats = latent_features(&mel.transpose());
        for (f, s) in feats.iter_mut().zip(stats) {
            *f += 0.5 * s;
        }
    }
    Ok(feats)
}

/// Per-dimension time mean and std of an `N x D` latent.
pub fn latent_features(c: &Tensor) -> Vec<f64> {
    let ct = c.transpose();
    let mut out: Vec<f64> = (0..ct.rows()).map(|d| ct.row(d).iter().sum::<f64>() / ct.cols() as f64).collect();
    let stds: Vec<f64> = (0..ct.rows()).map(|d| Tensor::from_vec(1, ct.cols(), ct.row(d).to_vec()).std()).collect();
    out.extend(stds);
    out
}

fn moments(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 feature vectors, got {n}")));
    }
    let d = set[0].len();
    if d == 0 || set.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors must share a non-zero length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| set[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with the matrix root
/// taken as `(S_a^(1/2) S_b S_a^(1/2))^(1/2)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, mut sa) = moments(a)?;
    let (mu_b, mut sb) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Shape("feature sets have different widths".into()));
    }
    let d = mu_a.len();
    if min_eigenvalue(&sa) <= 0.0 || min_eigenvalue(&sb) <= 0.0 {
        log::warn!("degenerate feature covariance; adding ridge {RIDGE}");
        sa += DMatrix::identity(d, d) * RIDGE;
        sb += DMatrix::identity(d, d) * RIDGE;
    }
    let ra = psd_sqrt(&sa);
    let cross = psd_sqrt(&(&ra * &sb * &ra));
    let diff = mu_a - mu_b;
    let dist = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(dist.max(0.0))
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean (cosine, Euclidean) distance from each generated feature vector to the
/// style feature vector.
pub fn eval_style_distance(generated: &[Vec<f64>], style: &[f64]) -> Result<(f64, f64)> {
    if generated.is_empty() {
        return Err(Error::Data("no generated clips to compare".into()));
    }
    if generated.iter().any(|g| g.len() != style.len()) {
        return Err(Error::Shape("feature width mismatch".into()));
    }
    let n = generated.len() as f64;
    let cos = generated.iter().map(|g| cosine_distance(g, style)).sum::<f64>() / n;
    let euc = generated.iter().map(|g| euclidean_distance(g, style)).sum::<f64>() / n;
    Ok((cos, euc))
}

/// Pearson correlation over all elements. Zero when either side is constant.
pub fn pearson(a: &Tensor, b: &Tensor) -> f64 {
    let (ma, mb) = (a.mean(), b.mean());
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coherence {
    /// Mean Pearson r between each generated latent and its own target.
    pub mean_r: f64,
    /// `matrix[i][j] = r(generated_i, target_j)`.
    pub matrix: Vec<Vec<f64>>,
    /// Fraction of rows whose maximum sits on the diagonal.
    pub diagonal_fraction: f64,
}

pub fn coherence(generated: &[Tensor], targets: &[Tensor]) -> Result<Coherence> {
    if generated.is_empty() || generated.len() != targets.len() {
        return Err(Error::Data(format!("{} generated vs {} targets", generated.len(), targets.len())));
    }
    for (g, t) in generated.iter().zip(targets) {
        if g.shape() != t.shape() {
            return Err(Error::Shape(format!("generated {:?} vs target {:?}", g.shape(), t.shape())));
        }
    }
    let n = generated.len();
    let matrix: Vec<Vec<f64>> = generated
        .iter()
        .map(|g| targets.iter().map(|t| if g.shape() == t.shape() { pearson(g, t) } else { f64::NEG_INFINITY }).collect())
        .collect();
    let mean_r = (0..n).map(|i| matrix[i][i]).sum::<f64>() / n as f64;
    let hits = matrix
        .iter()
        .enumerate()
        .filter(|(i, row)| row.iter().enumerate().all(|(j, &v)| j == *i || v < row[*i]))
        .count();
    Ok(Coherence { mean_r, matrix, diagonal_fraction: hits as f64 / n as f64 })
}

/// Samples a stem latent for every test mix with `generate` and scores it
/// against the dataset's rule.
pub fn eval_conditional_coherence(
    mixes: &[Tensor],
    rule: Option<&super::Rule>,
    mut generate: impl FnMut(usize, &Tensor) -> Result<Tensor>,
) -> Result<Coherence> {
    let rule = rule.ok_or_else(|| Error::Data("dataset has no stored rule".into()))?;
    let targets = mixes.iter().map(|m| rule.apply(m)).collect::<Result<Vec<_>>>()?;
    let generated = mixes.iter().enumerate().map(|(i, m)| generate(i, m)).collect::<Result<Vec<_>>>()?;
    coherence(&generated, &targets)
}
