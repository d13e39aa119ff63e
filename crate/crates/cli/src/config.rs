//! Run configuration file: a TOML document with `[sim]`, `[model]`,
//! `[train]` and `[paths]` sections. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use covtpp_core::sim::{CovariateSampler, ProcessKind, SimConfig};
use covtpp_core::{HyperParams, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub sim: Option<SimSection>,
    #[serde(default)]
    pub model: HyperParamsSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: PathsSection,
}

/// Optional default paths; command-line flags take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// `[model]` is the hyperparameter record minus the data-derived dimensions.
pub type HyperParamsSection = HyperParams;

fn default_kind() -> ProcessKind {
    ProcessKind::Hawkes
}

/// `[sim]` section; unspecified fields fall back to the sparse-relevance
/// defaults for the chosen process kind.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_kind")]
    pub kind: ProcessKind,
    pub horizon: Option<f64>,
    pub features: Option<usize>,
    pub sequences: Option<usize>,
    pub seed: Option<u64>,
    pub time_weight: Option<Vec<f64>>,
    pub excitation: Option<f64>,
    pub decay: Option<f64>,
    pub type_weight: Option<Vec<f64>>,
    pub history_weight: Option<f64>,
    pub threshold: Option<f64>,
    pub covariate_low: Option<Vec<f64>>,
    pub covariate_high: Option<Vec<f64>>,
}

impl SimSection {
    pub fn to_sim_config(&self) -> Result<SimConfig, ConfigError> {
        let features = self.features.unwrap_or(10);
        if features < 2 {
            return Err(ConfigError::Invalid("sim.features must be >= 2".into()));
        }
        let mut cfg = match self.kind {
            ProcessKind::Hawkes => SimConfig::hawkes_sparse(features),
            ProcessKind::Poisson => SimConfig::poisson_sparse(features),
        };
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.sequences {
            cfg.sequences = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.time_weight {
            cfg.time_weight = v.clone();
        }
        if let Some(v) = self.excitation {
            cfg.excitation = v;
        }
        if let Some(v) = self.decay {
            cfg.decay = v;
        }
        if let Some(v) = &self.type_weight {
            cfg.type_weight = v.clone();
        }
        if let Some(v) = self.history_weight {
            cfg.history_weight = v;
        }
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        let low = self
            .covariate_low
            .clone()
            .unwrap_or_else(|| cfg.sampler.low.clone());
        let high = self
            .covariate_high
            .clone()
            .unwrap_or_else(|| cfg.sampler.high.clone());
        cfg.sampler = CovariateSampler { low, high };
        cfg.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.display().to_string(),
        source,
    })
}
