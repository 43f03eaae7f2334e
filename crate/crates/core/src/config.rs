//! Run configuration shared by the command-line tool: one JSON document
//! covering data, model, training and every evaluation protocol.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, synth, Dataset, SynthSpec};
use crate::downstream::anomaly::AnomalyConfig;
use crate::downstream::classify::ClassifyConfig;
use crate::downstream::forecast::ForecastConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::time_embedding::{TeKind, TimeEmbeddingConfig};
use crate::trainer::TrainConfig;

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "TREP_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Forecast,
    Classify,
    Anomaly,
    WindowedAnomaly,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Forecast => "forecast",
            Self::Classify => "classify",
            Self::Anomaly => "anomaly",
            Self::WindowedAnomaly => "windowed-anomaly",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown protocol {s:?}")))
    }
}

/// Where the series come from: a CSV file or a synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Separate held-out file for classification.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    /// Generator seed; defaults to the run seed.
    #[serde(default)]
    pub synth_seed: Option<u64>,
    /// Trailing fraction of instances held out for classification when no
    /// test file is given.
    #[serde(default = "default_test_frac")]
    pub test_frac: f64,
    /// Fraction of cells marked missing after loading.
    #[serde(default)]
    pub mask_fraction: f64,
}

fn default_test_frac() -> f64 {
    1.0 / 3.0
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            test_path: None,
            synth: None,
            synth_seed: None,
            test_frac: default_test_frac(),
            mask_fraction: 0.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.path.is_some() == self.synth.is_some() {
            return Err(Error::Config("data needs exactly one of `path` or `synth`".into()));
        }
        if !(self.test_frac > 0.0 && self.test_frac < 1.0) {
            return Err(Error::Config(format!("test_frac must be in (0, 1), got {}", self.test_frac)));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::Config(format!("mask_fraction must be in [0, 1), got {}", self.mask_fraction)));
        }
        Ok(())
    }

    /// Loads the main dataset and, when configured, a separate test set.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        self.validate()?;
        let mut main = match (&self.path, &self.synth) {
            (Some(p), _) => load_csv(p)?,
            (None, Some(spec)) => synth(spec, self.synth_seed.unwrap_or(seed))?,
            (None, None) => unreachable!("validated above"),
        };
        let mut test = self.test_path.as_deref().map(load_csv).transpose()?;
        if self.mask_fraction > 0.0 {
            main.mask_fraction(self.mask_fraction, seed.wrapping_add(1))?;
            if let Some(t) = test.as_mut() {
                t.mask_fraction(self.mask_fraction, seed.wrapping_add(2))?;
            }
        }
        Ok((main, test))
    }
}

/// Encoder plus an optional time-embedding override; without one the
/// embedding follows the protocol (MLP for classification, Time2Vec
/// otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub time_embedding: Option<TimeEmbeddingConfig>,
}

fn default_encoder() -> EncoderConfig {
    EncoderConfig::new(0)
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: default_encoder(), time_embedding: None }
    }
}

impl ModelConfig {
    pub fn time_embedding_for(&self, protocol: Option<Protocol>) -> TimeEmbeddingConfig {
        self.time_embedding.unwrap_or_else(|| {
            let kind = if protocol == Some(Protocol::Classify) { TeKind::Mlp } else { TeKind::Time2vec };
            TimeEmbeddingConfig { kind, ..Default::default() }
        })
    }

    /// Architecture for data with `channels` inputs.
    pub fn architecture(&self, channels: usize, protocol: Option<Protocol>) -> Result<Architecture> {
        let mut encoder = self.encoder;
        if encoder.input_dims == 0 {
            encoder.input_dims = channels;
        } else if encoder.input_dims != channels {
            return Err(Error::Dataset(format!(
                "config sets {} input channels but the data has {channels}",
                encoder.input_dims
            )));
        }
        let arch = Architecture { encoder, time_embedding: self.time_embedding_for(protocol) };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowedConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
}

fn default_window() -> usize {
    6
}

fn default_train_frac() -> f64 {
    0.7
}

impl Default for WindowedConfig {
    fn default() -> Self {
        Self { window: default_window(), train_frac: default_train_frac() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub protocol: Option<Protocol>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub forecast: ForecastConfig,
    #[serde(default)]
    pub classify: ClassifyConfig,
    #[serde(default)]
    pub anomaly: AnomalyConfig,
    #[serde(default)]
    pub windowed: WindowedConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fixes the seed (explicit value, then the config, then `TREP_SEED`,
    /// then the training section) and copies it into the training section.
    pub fn resolve_seed(&mut self, explicit: Option<u64>) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a seed")))?),
            Err(_) => None,
        };
        let seed = explicit.or(self.seed).or(env).unwrap_or(self.train.seed);
        self.seed = Some(seed);
        self.train.seed = seed;
        Ok(seed)
    }

    /// Checks every section that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.forecast.validate()?;
        self.classify.validate()?;
        self.anomaly.validate()?;
        if self.windowed.window == 0 || !(self.windowed.train_frac > 0.0 && self.windowed.train_frac < 1.0) {
            return Err(Error::Config(format!(
                "windowed protocol needs window >= 1 and train_frac in (0, 1), got {:?}",
                self.windowed
            )));
        }
        let mut enc = self.model.encoder;
        enc.input_dims = enc.input_dims.max(1);
        enc.validate()?;
        self.model.time_embedding_for(self.protocol).validate()
    }

    /// Pretty JSON of the configuration with every default filled in.
    pub fn echo(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.pointer_mut("/model") {
            obj["time_embedding"] = serde_json::to_value(self.model.time_embedding_for(self.protocol))?;
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}
