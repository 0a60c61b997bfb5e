//! Paired (mix, stem) datasets: ingestion from stem folders and synthetic
//! latent pairs with a known mix-to-stem rule.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{LatentSequence, SourceKind};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub mix: T,
    pub stem: T,
}

#[derive(Clone, Debug)]
pub struct PairedDataset<T> {
    pub train: Vec<Pair<T>>,
    pub test: Vec<Pair<T>>,
    /// Present for synthetic data.
    pub rule: Option<Rule>,
}

impl<T> PairedDataset<T> {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Picks a uniformly random non-empty subset of `0..n`, in index order.
pub fn random_nonempty_subset(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n > 0 && n < 64, "subset size out of range");
    let mask = rng.random_range(1..(1u64 << n));
    (0..n).filter(|i| mask >> i & 1 == 1).collect()
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// One subdirectory per track; `target` names the stem file (e.g. `bass.wav`).
/// Each track's mix is a seeded non-empty subset of its other stems.
/// Tracks are shuffled with the same seed and the last `test_fraction` become
/// the test split.
pub fn ingest_pairs(
    dir: impl AsRef<Path>,
    target: &str,
    sample_rate: Option<u32>,
    test_fraction: f64,
    seed: u64,
) -> Result<PairedDataset<Waveform>> {
    let dir = dir.as_ref();
    let mut tracks: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read dataset directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    tracks.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for track in &tracks {
        let files = wav_files(track)?;
        let Some(target_path) = files.iter().find(|p| p.file_name().is_some_and(|n| n == target)) else {
            continue;
        };
        let others: Vec<&PathBuf> = files.iter().filter(|p| *p != target_path).collect();
        if others.is_empty() {
            continue;
        }
        let stem = Waveform::read_wav(target_path, sample_rate)?;
        let chosen = random_nonempty_subset(others.len(), &mut rng);
        let parts = chosen.iter().map(|&i| Waveform::read_wav(others[i], Some(stem.sample_rate()))).collect::<Result<Vec<_>>>()?;
        if let Some(p) = parts.iter().find(|p| p.len() != stem.len()) {
            return Err(Error::Data(format!(
                "track {}: stem lengths differ ({} vs {} samples)",
                track.display(),
                p.len(),
                stem.len()
            )));
        }
        let mix = Waveform::mix(&parts.iter().collect::<Vec<_>>())?;
        pairs.push(Pair { mix, stem });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no tracks with a {target:?} stem found in {}", dir.display())));
    }
    Ok(split(pairs, test_fraction, &mut rng, None))
}

fn split<T>(mut pairs: Vec<Pair<T>>, test_fraction: f64, rng: &mut impl Rng, rule: Option<Rule>) -> PairedDataset<T> {
    pairs.shuffle(rng);
    let n_test = ((pairs.len() as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let test = pairs.split_off(pairs.len() - n_test.min(pairs.len()));
    PairedDataset { train: pairs, test, rule }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// Two-tap average in time (a one-octave-down smoothing) of the first
    /// `dim_y` mix dimensions, cycling if `dim_y > dim_x`.
    LowpassOctave,
    /// `c_y = c_x A` with a seeded Gaussian `A`.
    FixedLinearMap,
    /// `c_y = c_x`; requires `dim_x == dim_y`.
    Identity,
}

/// Deterministic mix-to-stem map kept with a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Rule {
    LowpassOctave { dim_y: usize },
    /// Row-major `dim_x x dim_y` matrix.
    Linear { dim_x: usize, dim_y: usize, matrix: Vec<f64> },
}

impl Rule {
    pub fn identity(dim: usize) -> Self {
        let m = Tensor::from_fn(dim, dim, |r, c| if r == c { 1.0 } else { 0.0 });
        Rule::Linear { dim_x: dim, dim_y: dim, matrix: m.into_vec() }
    }

    pub fn dim_y(&self) -> usize {
        match self {
            Rule::LowpassOctave { dim_y } | Rule::Linear { dim_y, .. } => *dim_y,
        }
    }

    /// Maps an `N x dim_x` mix latent to `N x dim_y`.
    pub fn apply(&self, cx: &Tensor) -> Result<Tensor> {
        match self {
            Rule::LowpassOctave { dim_y } => {
                let dx = cx.cols();
                Ok(Tensor::from_fn(cx.rows(), *dim_y, |t, d| {
                    let prev = if t == 0 { 0.0 } else { cx.get(t - 1, d % dx) };
                    0.5 * (cx.get(t, d % dx) + prev)
                }))
            }
            Rule::Linear { dim_x, dim_y, matrix } => {
                if cx.cols() != *dim_x {
                    return Err(Error::Shape(format!("rule expects {dim_x} mix dims, got {}", cx.cols())));
                }
                Ok(cx.matmul(&Tensor::from_vec(*dim_x, *dim_y, matrix.clone())))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub rule: RuleKind,
    pub n_items: usize,
    /// Latent steps per item.
    pub n_steps: usize,
    pub dim_x: usize,
    pub dim_y: usize,
    pub noise_level: f64,
    /// Lag-one correlation of the mix process (exponential-kernel GP).
    pub smoothness: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            rule: RuleKind::FixedLinearMap,
            n_items: 256,
            n_steps: 64,
            dim_x: 8,
            dim_y: 8,
            noise_level: 0.05,
            smoothness: 0.9,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_steps == 0 || self.dim_x == 0 || self.dim_y == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothness) || self.noise_level < 0.0 {
            return Err(Error::Config("smoothness must be in [0, 1) and noise_level >= 0".into()));
        }
        if self.rule == RuleKind::Identity && self.dim_x != self.dim_y {
            return Err(Error::Config("identity rule needs dim_x == dim_y".into()));
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Stationary unit-variance Gaussian process with `corr(t, t+1) = rho`,
/// independent per dimension.
pub fn gaussian_process(n: usize, dim: usize, rho: f64, rng: &mut impl Rng) -> Tensor {
    let mut out = Tensor::zeros(n, dim);
    let innov = (1.0 - rho * rho).sqrt();
    for d in 0..dim {
        let mut x = normal(rng);
        for t in 0..n {
            if t > 0 {
                x = rho * x + innov * normal(rng);
            }
            out.set(t, d, x);
        }
    }
    out
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<PairedDataset<Tensor>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rule = match spec.rule {
        RuleKind::LowpassOctave => Rule::LowpassOctave { dim_y: spec.dim_y },
        RuleKind::Identity => Rule::identity(spec.dim_x),
        RuleKind::FixedLinearMap => {
            let s = 1.0 / (spec.dim_x as f64).sqrt();
            let matrix = (0..spec.dim_x * spec.dim_y).map(|_| s * normal(&mut rng)).collect();
            Rule::Linear { dim_x: spec.dim_x, dim_y: spec.dim_y, matrix }
        }
    };
    let mut pairs = Vec::with_capacity(spec.n_items);
    for _ in 0..spec.n_items {
        let mix = gaussian_process(spec.n_steps, spec.dim_x, spec.smoothness, &mut rng);
        let mut stem = rule.apply(&mix)?;
        if spec.noise_level > 0.0 {
            for v in stem.data_mut() {
                *v += spec.noise_level * normal(&mut rng);
            }
        }
        pairs.push(Pair { mix, stem });
    }
    Ok(split(pairs, spec.test_fraction, &mut rng, Some(rule)))
}

/// Writes `train/` and `test/` folders of `NNNN_mix.lats` / `NNNN_stem.lats`
/// plus `rule.json`.
pub fn save_latent_dataset(ds: &PairedDataset<Tensor>, dir: impl AsRef<Path>, r_time: u32) -> Result<()> {
    let dir = dir.as_ref();
    for (name, items) in [("train", &ds.train), ("test", &ds.test)] {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub)?;
        for (i, p) in items.iter().enumerate() {
            LatentSequence::new(p.mix.clone(), r_time, SourceKind::Mix)?.save(sub.join(format!("{i:04}_mix.lats")))?;
            LatentSequence::new(p.stem.clone(), r_time, SourceKind::Stem)?.save(sub.join(format!("{i:04}_stem.lats")))?;
        }
    }
    if let Some(rule) = &ds.rule {
        let text = serde_json::to_string_pretty(rule).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("rule.json"), text)?;
    }
    Ok(())
}

pub fn load_latent_dataset(dir: impl AsRef<Path>) -> Result<PairedDataset<Tensor>> {
    let dir = dir.as_ref();
    let read_split = |name: &str| -> Result<Vec<Pair<Tensor>>> {
        let sub = dir.join(name);
        if !sub.is_dir() {
            return Ok(Vec::new());
        }
        let mut mixes: Vec<PathBuf> = std::fs::read_dir(&sub)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with("_mix.lats"))
            .collect();
        mixes.sort();
        mixes
            .into_iter()
            .map(|m| {
                let stem = PathBuf::from(m.to_string_lossy().replace("_mix.lats", "_stem.lats"));
                let (mix, stem) = (LatentSequence::load(&m)?, LatentSequence::load(&stem)?);
                if mix.len() != stem.len() {
                    return Err(Error::Data(format!("{}: mix and stem lengths differ", m.display())));
                }
                Ok(Pair { mix: mix.into_vectors(), stem: stem.into_vectors() })
            })
            .collect()
    };
    let (train, test) = (read_split("train")?, read_split("test")?);
    if train.is_empty() && test.is_empty() {
        return Err(Error::Data(format!("no latent pairs under {}", dir.display())));
    }
    let rule_path = dir.join("rule.json");
    let rule = if rule_path.exists() {
        let text = std::fs::read_to_string(rule_path)?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Format(format!("rule.json: {e}")))?)
    } else {
        None
    };
    Ok(PairedDataset { train, test, rule })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_are_nonempty_and_cover_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let s = random_nonempty_subset(3, &mut rng);
            assert!(!s.is_empty());
            seen.insert(s);
        }
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn noiseless_synthetic_follows_rule() {
        let spec = SyntheticSpec { noise_level: 0.0, n_items: 10, ..Default::default() };
        let ds = make_synthetic(&spec).unwrap();
        let rule = ds.rule.as_ref().unwrap();
        for p in ds.train.iter().chain(&ds.test) {
            assert_eq!(rule.apply(&p.mix).unwrap(), p.stem);
        }
        assert_eq!(ds.test.len(), 1);
    }

    #[test]
    fn identity_rule_copies_mix() {
        let spec = SyntheticSpec { rule: RuleKind::Identity, noise_level: 0.0, n_items: 4, ..Default::default() };
        let ds = make_synthetic(&spec).unwrap();
        assert!(ds.train.iter().all(|p| p.mix == p.stem));
        let bad = SyntheticSpec { rule: RuleKind::Identity, dim_y: 4, ..Default::default() };
        assert!(make_synthetic(&bad).is_err());
    }

    #[test]
    fn lowpass_rule_averages_neighbours() {
        let cx = Tensor::from_vec(3, 1, vec![2.0, 4.0, 0.0]);
        let cy = Rule::LowpassOctave { dim_y: 2 }.apply(&cx).unwrap();
        assert_eq!(cy.data(), &[1.0, 1.0, 3.0, 3.0, 2.0, 2.0]);
    }

    #[test]
    fn synthetic_is_reproducible() {
        let spec = SyntheticSpec { n_items: 6, ..Default::default() };
        let (a, b) = (make_synthetic(&spec).unwrap(), make_synthetic(&spec).unwrap());
        assert_eq!(a.train, b.train);
        assert_eq!(a.rule, b.rule);
    }

    #[test]
    fn process_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian_process(20_000, 1, 0.9, &mut rng);
        assert!((x.std() - 1.0).abs() < 0.1, "{}", x.std());
    }

    #[test]
    fn latent_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic(&SyntheticSpec { n_items: 5, n_steps: 8, ..Default::default() }).unwrap();
        save_latent_dataset(&ds, dir.path(), 256).unwrap();
        let back = load_latent_dataset(dir.path()).unwrap();
        assert_eq!(back.train.len(), ds.train.len());
        assert_eq!(back.rule, ds.rule);
        let err = back.train[0].stem.zip_map(&ds.train[0].stem, |a, b| (a - b).abs()).max_abs();
        assert!(err < 1e-6);
    }
}
