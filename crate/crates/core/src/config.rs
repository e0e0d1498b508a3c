//! Application settings read from TOML, one section per subsystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cdeflow::ModelConfig;
use crate::datastore::DataConfig;
use crate::error::{Error, Result};
use crate::evalx::{Axis, SweepSpec};
use crate::sampler::IntensitySpec;
use crate::simkit::SimConfig;
use crate::trainer::{TrainConfig, Variant};

/// Split sizes and window geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub lookback_days: usize,
    pub max_horizon: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        DataSection {
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            lookback_days: d.lookback_days,
            max_horizon: d.max_horizon,
        }
    }
}

/// Overrides applied on top of the per-axis sweep defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub n_seeds: Option<usize>,
    pub values: Option<Vec<f64>>,
    pub variants: Option<Vec<Variant>>,
    pub gamma: Option<f64>,
    pub scarcity: Option<f64>,
    pub alpha: Option<f64>,
    pub tau: Option<usize>,
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Seeds both dataset generation and training.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub log_level: String,
    pub sim: SimConfig,
    pub sampler: IntensitySpec,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            log_level: "info".into(),
            sim: SimConfig::default(),
            sampler: IntensitySpec::default(),
            data: DataSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: AppConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data_config().validate()?;
        self.model.validate()?;
        self.train_config().validate()
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            n_train: self.data.n_train,
            n_val: self.data.n_val,
            n_test: self.data.n_test,
            lookback_days: self.data.lookback_days,
            max_horizon: self.data.max_horizon,
            seed: self.seed,
            sim: self.sim.clone(),
            intensity: self.sampler.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn sweep_spec(&self, axis: Axis) -> Result<SweepSpec> {
        let mut s = SweepSpec::for_axis(axis);
        let o = &self.sweep;
        if let Some(v) = o.n_seeds {
            s.n_seeds = v;
        }
        if let Some(v) = &o.values {
            s.values = v.clone();
        }
        if let Some(v) = &o.variants {
            s.variants = v.clone();
        }
        if let Some(v) = o.gamma {
            s.gamma = v;
        }
        if let Some(v) = o.scarcity {
            s.scarcity = v;
        }
        if let Some(v) = o.alpha {
            s.alpha = v;
        }
        if let Some(v) = o.tau {
            s.tau = v;
        }
        if let Some(v) = o.threads {
            s.threads = v;
        }
        s.data = self.data_config();
        s.model = self.model.clone();
        s.train = self.train_config();
        s.validate()?;
        Ok(s)
    }
}
