use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::Codec;
use crate::encoder::{EncoderConfig, SplitSizes};
use crate::error::{Error, Result};
use crate::optimizer::BoConfig;
use crate::privacy::DEFAULT_RIDGE_GRID;
use crate::surrogate::FitOptions;
use crate::Execution;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub root_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub execution: Execution,
    /// Write per-evaluation wall times into the JSON-lines file. Off by default
    /// so reruns are byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
    pub encoder: EncoderSection,
    pub data: DataSection,
    pub channel: ChannelSection,
    pub bo: BoSection,
    #[serde(default)]
    pub privacy: PrivacySection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub layers: usize,
    pub dim: usize,
    #[serde(default = "d_patch")]
    pub patch: usize,
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "d_pos_scale")]
    pub pos_scale: f64,
}

fn d_patch() -> usize {
    8
}
fn d_image_size() -> usize {
    32
}
fn d_channels() -> usize {
    3
}
fn d_mlp_ratio() -> usize {
    4
}
fn d_pos_scale() -> f64 {
    EncoderConfig::default().pos_scale
}

impl EncoderSection {
    pub fn to_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            dim: self.dim,
            patch: self.patch,
            image_size: self.image_size,
            channels: self.channels,
            mlp_ratio: self.mlp_ratio,
            pos_scale: self.pos_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_samples: usize,
    pub classes: usize,
    pub redundancy: f64,
    pub splits: SplitSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    /// Operating SNR used during the search.
    pub snr_db: f64,
    #[serde(default = "d_sweep")]
    pub sweep_snr_db: Vec<f64>,
    #[serde(default)]
    pub codec: Codec,
    /// Token budget for picking policies in the SNR sweep; defaults to the
    /// median communication cost of the Pareto set.
    #[serde(default)]
    pub sweep_budget_tokens: Option<f64>,
}

fn d_sweep() -> Vec<f64> {
    vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoSection {
    pub n_init: usize,
    pub budget: usize,
    #[serde(default = "d_pool")]
    pub candidate_pool_size: usize,
    #[serde(default = "d_mc")]
    pub mc_samples: usize,
    #[serde(default = "d_perturbations")]
    pub perturbations: usize,
    #[serde(default = "d_sigma")]
    pub perturbation_sigma: f64,
    #[serde(default = "d_refit_until")]
    pub refit_all_until: usize,
    #[serde(default = "d_refit_interval")]
    pub refit_interval: usize,
    #[serde(default = "d_restarts")]
    pub fit_restarts: usize,
    #[serde(default = "d_max_evals")]
    pub fit_max_evals: usize,
}

fn d_pool() -> usize {
    BoConfig::default().candidate_pool_size
}
fn d_mc() -> usize {
    BoConfig::default().mc_samples
}
fn d_perturbations() -> usize {
    BoConfig::default().perturbations
}
fn d_sigma() -> f64 {
    BoConfig::default().perturbation_sigma
}
fn d_refit_until() -> usize {
    BoConfig::default().refit_all_until
}
fn d_refit_interval() -> usize {
    BoConfig::default().refit_interval
}
fn d_restarts() -> usize {
    FitOptions::default().restarts
}
fn d_max_evals() -> usize {
    FitOptions::default().max_evals
}

impl BoSection {
    pub fn to_config(&self, seed: u64) -> BoConfig {
        BoConfig {
            n_init: self.n_init,
            budget: self.budget,
            candidate_pool_size: self.candidate_pool_size,
            mc_samples: self.mc_samples,
            perturbations: self.perturbations,
            perturbation_sigma: self.perturbation_sigma,
            refit_all_until: self.refit_all_until,
            refit_interval: self.refit_interval,
            fit: FitOptions {
                restarts: self.fit_restarts,
                max_evals: self.fit_max_evals,
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    /// Ridge strengths the adversary chooses from by validation.
    #[serde(default = "d_grid")]
    pub ridge_grid: Vec<f64>,
    #[serde(default = "d_val_fraction")]
    pub validation_fraction: f64,
}

fn d_grid() -> Vec<f64> {
    DEFAULT_RIDGE_GRID.to_vec()
}
fn d_val_fraction() -> f64 {
    0.2
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            ridge_grid: d_grid(),
            validation_fraction: d_val_fraction(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.encoder.to_config().validate()?;
        let d = &self.data;
        crate::encoder::DatasetParams::new(0, d.n_samples, d.classes, d.redundancy).validate()?;
        if d.splits.total() > d.n_samples {
            return Err(Error::Config(format!(
                "data.splits need {} samples but data.n_samples = {}",
                d.splits.total(),
                d.n_samples
            )));
        }
        if d.splits.search_subset == 0 || d.splits.search_subset > d.splits.evaluation {
            return Err(Error::Config("data.splits.search_subset must be in 1..=evaluation".into()));
        }
        if d.splits.calibration == 0 || d.splits.evaluation == 0 {
            return Err(Error::Config("data.splits.calibration and evaluation must be positive".into()));
        }
        if self.channel.snr_db.is_nan() || self.channel.sweep_snr_db.iter().any(|s| s.is_nan()) {
            return Err(Error::Config("channel SNR values must be numbers".into()));
        }
        if self.channel.sweep_snr_db.is_empty() {
            return Err(Error::Config("channel.sweep_snr_db must not be empty".into()));
        }
        if let Codec::Linear { compression_ratio, .. } = self.channel.codec {
            if !(compression_ratio > 0.0 && compression_ratio <= 1.0) {
                return Err(Error::Config(format!(
                    "channel.codec.compression_ratio {compression_ratio} outside (0, 1]"
                )));
            }
        }
        self.bo.to_config(0).validate(self.encoder.layers)?;
        if self.privacy.ridge_grid.is_empty() || self.privacy.ridge_grid.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("privacy.ridge_grid must hold positive values".into()));
        }
        if !(0.0..1.0).contains(&self.privacy.validation_fraction) {
            return Err(Error::Config("privacy.validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Small configuration used by the examples and tests.
pub const EXAMPLE_CONFIG: &str = r#"version = 1
root_seed = 7
output_dir = "runs/example"

[encoder]
layers = 6
dim = 32

[data]
n_samples = 1500
classes = 8
redundancy = 0.7

[data.splits]
calibration = 400
evaluation = 400
search_subset = 200
adversary = 500
holdout = 100

[channel]
snr_db = 20.0
sweep_snr_db = [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0]

[bo]
n_init = 20
budget = 100
"#;
