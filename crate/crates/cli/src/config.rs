//! Experiment configuration: a scale preset, deep-merged with an optional
//! TOML file and command-line overrides.

use std::path::{Path, PathBuf};

use bermudan_core::hedging::HedgeConfig;
use bermudan_core::market::{Market, ModelParams};
use bermudan_core::pricing::DualConfig;
use bermudan_core::stopping::{NetConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid TOML: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl From<bermudan_core::Error> for ConfigError {
    fn from(e: bermudan_core::Error) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Sample sizes and step counts of the original study.
    Full,
    /// Reduced sizes that run in minutes on one CPU.
    Desk,
}

/// Symmetric max-call model: every asset shares `s0`, `dividend` and `vol`,
/// and all pairs share the correlation `corr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub assets: usize,
    pub s0: f64,
    pub rate: f64,
    pub dividend: f64,
    pub vol: f64,
    pub corr: f64,
    pub strike: f64,
    pub maturity: f64,
    pub exercise_dates: usize,
    pub rebalance_steps: usize,
}

impl ModelConfig {
    pub fn params(&self) -> ModelParams {
        ModelParams::symmetric(
            self.assets,
            self.s0,
            self.rate,
            self.dividend,
            self.vol,
            self.corr,
            self.strike,
            self.maturity,
            self.exercise_dates,
            self.rebalance_steps,
        )
    }

    pub fn market(&self) -> Result<Market, ConfigError> {
        Ok(Market::new(self.params())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub seed: u64,
    /// Confidence intervals are at level `1 - alpha`.
    pub alpha: f64,
    pub output_dir: PathBuf,
    /// Paths `K_L` for the low-biased estimate.
    pub lower_paths: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dual: DualConfig,
    pub hedge: HedgeConfig,
}

const RATES: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

impl ExperimentConfig {
    /// Preset for the 5-asset max-call benchmark at the given scale.
    pub fn preset(scale: Scale) -> Self {
        let model = ModelConfig {
            assets: 5,
            s0: 100.0,
            rate: 0.05,
            dividend: 0.1,
            vol: 0.2,
            corr: 0.0,
            strike: 100.0,
            maturity: 3.0,
            exercise_dates: 9,
            rebalance_steps: 12,
        };
        let histogram = (100, 5.0);
        let (train, dual, hedge) = match scale {
            Scale::Full => (
                TrainConfig {
                    paths: 4_096_000,
                    batch_size: 8192,
                    steps_first: 6000,
                    steps_rest: 3500,
                    warm_start: true,
                    extended_state: true,
                    learning_rates: RATES.to_vec(),
                    net: NetConfig::default(),
                },
                DualConfig { outer_paths: 2048, inner_paths: 2048 },
                HedgeConfig {
                    train_paths: 1_024_000,
                    eval_paths: 4_096_000,
                    batch_size: 8192,
                    steps_first: 10_000,
                    steps_rest: 3000,
                    warm_start: true,
                    learning_rates: RATES.to_vec(),
                    net: NetConfig::default(),
                    histogram_bins: histogram.0,
                    histogram_sds: histogram.1,
                },
            ),
            Scale::Desk => (
                TrainConfig {
                    paths: 400_000,
                    batch_size: 1024,
                    steps_first: 1500,
                    steps_rest: 750,
                    warm_start: true,
                    extended_state: true,
                    learning_rates: RATES.to_vec(),
                    net: NetConfig::default(),
                },
                DualConfig { outer_paths: 512, inner_paths: 512 },
                HedgeConfig {
                    train_paths: 200_000,
                    eval_paths: 500_000,
                    batch_size: 1024,
                    steps_first: 2000,
                    steps_rest: 600,
                    warm_start: true,
                    learning_rates: RATES.to_vec(),
                    net: NetConfig::default(),
                    histogram_bins: histogram.0,
                    histogram_sds: histogram.1,
                },
            ),
        };
        let lower_paths = match scale {
            Scale::Full => 4_096_000,
            Scale::Desk => 500_000,
        };
        Self {
            scale,
            seed: 1,
            alpha: 0.05,
            output_dir: PathBuf::from("results"),
            lower_paths,
            model,
            train,
            dual,
            hedge,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.market()?;
        self.train.validate()?;
        self.dual.validate()?;
        self.hedge.validate()?;
        if self.lower_paths < 2 {
            return Err(ConfigError::Invalid("lower_paths must be at least 2".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ConfigError::Invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }

    /// Canonical TOML rendering, used for hashing and the run manifest.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Overrides taken from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scale: Option<Scale>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

/// Recursively merge `over` into `base`; tables merge key by key, anything else replaces.
pub fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolve a configuration from TOML text (possibly empty) and overrides.
pub fn resolve(user: &str, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let user: toml::Table = toml::from_str(user)?;
    let scale = match (overrides.scale, user.get("scale")) {
        (Some(s), _) => s,
        (None, Some(v)) => v.clone().try_into::<Scale>()?,
        (None, None) => Scale::Desk,
    };
    let mut value = toml::Value::try_from(ExperimentConfig::preset(scale)).expect("preset serializes");
    merge(&mut value, toml::Value::Table(user));
    let mut config: ExperimentConfig = value.try_into()?;
    config.scale = scale;
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(dir) = &overrides.output_dir {
        config.output_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?,
        None => String::new(),
    };
    resolve(&text, overrides)
}
