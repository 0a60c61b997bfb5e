//! Python bindings for `stemdiff`.
//!
//! Latents and other matrices cross the boundary as lists of rows
//! (`list[list[float]]`, time-major); waveforms as a pair of channel lists.

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use stemdiff::autoencoder::{Autoencoder, AutoencoderConfig, LatentSequence, SourceKind};
use stemdiff::denoiser::{Denoiser, UNetConfig};
use stemdiff::diffusion::{self, CfgConvention, DiffusionTrainer, GuidanceConfig, LossConfig, NoiseSchedule, SamplerConfig, StyleVector};
use stemdiff::dsp::Waveform;
use stemdiff::nn::OptimizerConfig;
use stemdiff::pipeline;
use stemdiff::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) | Error::Wav(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged matrix: every row needs the same length"));
    }
    Ok(Tensor::from_vec(n, d, rows.into_iter().flatten().collect()))
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn source_kind(kind: &str) -> PyResult<SourceKind> {
    match kind {
        "stem" => Ok(SourceKind::Stem),
        "mix" => Ok(SourceKind::Mix),
        _ => Err(PyValueError::new_err(format!("kind must be 'stem' or 'mix', got {kind:?}"))),
    }
}

/// Spectrogram autoencoder.
#[pyclass(name = "Autoencoder")]
struct PyAutoencoder {
    inner: Autoencoder,
}

#[pymethods]
impl PyAutoencoder {
    /// `preset` is "desk" or "full".
    #[new]
    #[pyo3(signature = (preset = "desk", kind = "stem", seed = 0))]
    fn new(preset: &str, kind: &str, seed: u64) -> PyResult<Self> {
        let kind = source_kind(kind)?;
        let cfg = match preset {
            "desk" => AutoencoderConfig::desk(kind),
            "full" => AutoencoderConfig::full(kind),
            _ => return Err(PyValueError::new_err(format!("unknown preset {preset:?}"))),
        };
        Ok(Self { inner: Autoencoder::new(cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Autoencoder::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.config().sample_rate
    }

    #[getter]
    fn r_time(&self) -> usize {
        self.inner.config().r_time
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.config().latent_dim
    }

    /// Stereo waveform to an `N x D` latent. Pass the same list twice for mono.
    fn encode(&self, left: Vec<f64>, right: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let w = Waveform::new(left, right, self.inner.config().sample_rate).map_err(py_err)?;
        Ok(to_rows(self.inner.encode(&w).map_err(py_err)?.vectors()))
    }

    /// `N x D` latent to `(left, right)`.
    fn decode(&self, latent: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let cfg = self.inner.config();
        let seq = LatentSequence::new(to_tensor(latent)?, cfg.r_time as u32, cfg.source_kind).map_err(py_err)?;
        let [l, r] = self.inner.decode(&seq).map_err(py_err)?.channels().clone();
        Ok((l, r))
    }
}

/// Conditional U-Net predicting `v`.
#[pyclass(name = "Denoiser")]
struct PyDenoiser {
    inner: Denoiser,
}

#[pymethods]
impl PyDenoiser {
    /// Desk-size network for `in_dim`-wide stems conditioned on `cond_dim`-wide mixes.
    #[new]
    #[pyo3(signature = (in_dim, cond_dim, seed = 0, channels = None))]
    fn new(in_dim: usize, cond_dim: usize, seed: u64, channels: Option<Vec<usize>>) -> PyResult<Self> {
        let mut cfg = UNetConfig::desk(in_dim, cond_dim);
        if let Some(ch) = channels {
            cfg.attn_levels.retain(|&l| l < ch.len());
            cfg.channel_schedule = ch;
        }
        Ok(Self { inner: Denoiser::new(cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Denoiser::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn length_multiple(&self) -> usize {
        self.inner.config().length_multiple()
    }

    #[pyo3(signature = (z, t, cond = None))]
    fn predict(&self, z: Vec<Vec<f64>>, t: f64, cond: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let cond = cond.map(to_tensor).transpose()?;
        Ok(to_rows(&self.inner.predict(&to_tensor(z)?, t, cond.as_ref()).map_err(py_err)?))
    }
}

/// AdamW training loop for a [`PyDenoiser`].
#[pyclass(name = "DiffusionTrainer")]
struct PyTrainer {
    inner: DiffusionTrainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (denoiser, lr = 1e-3, cond_dropout = 0.15, clip_norm = Some(1.0), seed = 0))]
    fn new(denoiser: &PyDenoiser, lr: f64, cond_dropout: f64, clip_norm: Option<f64>, seed: u64) -> PyResult<Self> {
        let loss = LossConfig { cond_dropout_p: cond_dropout, ..LossConfig::default() };
        let mut inner = DiffusionTrainer::new(&denoiser.inner, OptimizerConfig::diffusion(lr), loss, seed).map_err(py_err)?;
        if let Some(c) = clip_norm {
            inner = inner.with_clip_norm(c);
        }
        Ok(Self { inner })
    }

    /// One update on a batch of `(stem, mix)` latents; returns the loss.
    fn step(&mut self, denoiser: &mut PyDenoiser, stems: Vec<Vec<Vec<f64>>>, mixes: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
        if stems.len() != mixes.len() {
            return Err(PyValueError::new_err(format!("{} stems vs {} mixes", stems.len(), mixes.len())));
        }
        let stems = stems.into_iter().map(to_tensor).collect::<PyResult<Vec<_>>>()?;
        let mixes = mixes.into_iter().map(to_tensor).collect::<PyResult<Vec<_>>>()?;
        let batch: Vec<(&Tensor, &Tensor)> = stems.iter().zip(&mixes).collect();
        self.inner.step(&mut denoiser.inner, &batch).map_err(py_err)
    }

    #[getter]
    fn steps_taken(&self) -> u64 {
        self.inner.steps_taken()
    }
}

/// DDIM sampling of a stem latent for one mix latent.
#[pyfunction]
#[pyo3(signature = (denoiser, cond, steps = 64, cfg_weight = 0.0, phi = 0.0, convention = "paper", style = None, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn sample(
    denoiser: &PyDenoiser,
    cond: Vec<Vec<f64>>,
    steps: usize,
    cfg_weight: f64,
    phi: f64,
    convention: &str,
    style: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let convention: CfgConvention = convention.parse().map_err(py_err)?;
    let style = style.map(StyleVector::new).transpose().map_err(py_err)?;
    let cfg = SamplerConfig {
        steps,
        guidance: GuidanceConfig { lambda_cfg: cfg_weight, phi, convention },
        style,
        seed,
        schedule: NoiseSchedule::Cosine,
    };
    Ok(to_rows(&diffusion::sample(&to_tensor(cond)?, &cfg, &denoiser.inner).map_err(py_err)?))
}

/// `(alpha, beta)` of the cosine schedule.
#[pyfunction]
fn rates(t: f64) -> PyResult<(f64, f64)> {
    NoiseSchedule::Cosine.rates(t).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (cond, uncond, weight, convention = "paper"))]
fn cfg_combine(cond: Vec<Vec<f64>>, uncond: Vec<Vec<f64>>, weight: f64, convention: &str) -> PyResult<Vec<Vec<f64>>> {
    let convention: CfgConvention = convention.parse().map_err(py_err)?;
    let out = diffusion::cfg_combine(&to_tensor(cond)?, &to_tensor(uncond)?, weight, convention).map_err(py_err)?;
    Ok(to_rows(&out))
}

#[pyfunction]
fn cfg_rescale(guided: Vec<Vec<f64>>, reference: Vec<Vec<f64>>, phi: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&diffusion::cfg_rescale(&to_tensor(guided)?, &to_tensor(reference)?, phi).map_err(py_err)?))
}

#[pyfunction]
fn style_ground(latent: Vec<Vec<f64>>, style: Vec<f64>, beta: f64) -> PyResult<Vec<Vec<f64>>> {
    let style = StyleVector::new(style).map_err(py_err)?;
    Ok(to_rows(&diffusion::style_ground(&to_tensor(latent)?, &style, beta).map_err(py_err)?))
}

/// Per-dimension time mean of a latent.
#[pyfunction]
fn time_mean(latent: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(diffusion::time_mean(&to_tensor(latent)?))
}

type Split = Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>;

/// Synthetic `(stem, mix)` latent pairs; returns `(train, test, rule)` where
/// `rule` maps a mix latent to its clean stem latent.
#[pyfunction]
#[pyo3(signature = (n_items = 256, n_steps = 64, dim = 8, rule = "fixed_linear_map", seed = 0))]
fn make_synthetic(n_items: usize, n_steps: usize, dim: usize, rule: &str, seed: u64) -> PyResult<(Split, Split, Rule)> {
    let rule = match rule {
        "fixed_linear_map" => pipeline::RuleKind::FixedLinearMap,
        "lowpass_octave" => pipeline::RuleKind::LowpassOctave,
        "identity" => pipeline::RuleKind::Identity,
        _ => return Err(PyValueError::new_err(format!("unknown rule {rule:?}"))),
    };
    let spec = pipeline::SyntheticSpec { rule, n_items, n_steps, dim_x: dim, dim_y: dim, seed, ..Default::default() };
    let ds = pipeline::make_synthetic(&spec).map_err(py_err)?;
    let split = |pairs: &[pipeline::Pair<Tensor>]| pairs.iter().map(|p| (to_rows(&p.stem), to_rows(&p.mix))).collect();
    let rule = ds.rule.clone().ok_or_else(|| PyValueError::new_err("synthetic dataset without a rule"))?;
    Ok((split(&ds.train), split(&ds.test), Rule { inner: rule }))
}

/// Ground-truth mapping of a synthetic dataset.
#[pyclass(name = "Rule")]
struct Rule {
    inner: pipeline::Rule,
}

#[pymethods]
impl Rule {
    fn apply(&self, mix: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.apply(&to_tensor(mix)?).map_err(py_err)?))
    }
}

/// Per-dimension time mean and std of a latent.
#[pyfunction]
fn latent_features(latent: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(pipeline::latent_features(&to_tensor(latent)?))
}

#[pyfunction]
fn frechet_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    pipeline::frechet_distance(&a, &b).map_err(py_err)
}

/// `(mean_r, diagonal_fraction)` between generated latents and their targets.
#[pyfunction]
fn coherence(generated: Vec<Vec<Vec<f64>>>, targets: Vec<Vec<Vec<f64>>>) -> PyResult<(f64, f64)> {
    let g = generated.into_iter().map(to_tensor).collect::<PyResult<Vec<_>>>()?;
    let t = targets.into_iter().map(to_tensor).collect::<PyResult<Vec<_>>>()?;
    let c = pipeline::coherence(&g, &t).map_err(py_err)?;
    Ok((c.mean_r, c.diagonal_fraction))
}

#[pymodule]
fn stemdiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAutoencoder>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<Rule>()?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(rates, m)?)?;
    m.add_function(wrap_pyfunction!(cfg_combine, m)?)?;
    m.add_function(wrap_pyfunction!(cfg_rescale, m)?)?;
    m.add_function(wrap_pyfunction!(style_ground, m)?)?;
    m.add_function(wrap_pyfunction!(time_mean, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(latent_features, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(coherence, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
