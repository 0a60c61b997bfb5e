//! TOML run configuration. Every section is optional and falls back to the
//! desk defaults; see `configs/desk.toml` for the full schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SyntheticSpec;
use crate::autoencoder::{AutoencoderConfig, SourceKind};
use crate::denoiser::UNetConfig;
use crate::diffusion::{CfgConvention, GuidanceConfig, LossWeighting};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Folder of per-track stem folders.
    pub data_dir: Option<PathBuf>,
    /// File name of the target stem inside each track folder.
    pub target_stem: String,
    pub log_every: usize,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self { iters: 2000, batch_size: 8, lr: 1e-3, data_dir: None, target_stem: "bass.wav".into(), log_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffTrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub weighting: LossWeighting,
    /// Latent dataset folder (`train/`, `test/`, optional `rule.json`).
    pub data_dir: Option<PathBuf>,
    pub log_every: usize,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        Self { iters: 5000, batch_size: 8, lr: 1e-3, clip_norm: Some(1.0), weighting: LossWeighting::Uniform, data_dir: None, log_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSettings {
    pub steps: usize,
    pub cfg_weight: f64,
    pub phi: f64,
    pub convention: CfgConvention,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self { steps: 64, cfg_weight: 0.0, phi: 0.0, convention: CfgConvention::PaperPrinted }
    }
}

impl SampleSettings {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig { lambda_cfg: self.cfg_weight, phi: self.phi, convention: self.convention }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub autoencoder: AutoencoderConfig,
    pub ae_train: AeTrainConfig,
    pub denoiser: UNetConfig,
    pub diff_train: DiffTrainConfig,
    pub sample: SampleSettings,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        Self {
            seed: 0,
            autoencoder: AutoencoderConfig::desk(SourceKind::Stem),
            ae_train: AeTrainConfig::default(),
            denoiser: UNetConfig::desk(synthetic.dim_y, synthetic.dim_x),
            diff_train: DiffTrainConfig::default(),
            sample: SampleSettings::default(),
            synthetic,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Loads and validates; referenced data folders must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text)?;
        for dir in [&cfg.ae_train.data_dir, &cfg.diff_train.data_dir].into_iter().flatten() {
            if !dir.exists() {
                return Err(Error::Config(format!("{} (referenced by {}) does not exist", dir.display(), path.display())));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.denoiser.validate()?;
        self.synthetic.validate()?;
        self.sample.guidance().validate()?;
        if self.sample.steps == 0 {
            return Err(Error::Config("sample.steps must be at least 1".into()));
        }
        for (name, b) in [("ae_train", self.ae_train.batch_size), ("diff_train", self.diff_train.batch_size)] {
            if b == 0 {
                return Err(Error::Config(format!("{name}.batch_size must be positive")));
            }
        }
        Ok(())
    }
}
