//! Run configuration files and error-to-exit-code mapping.

use std::fmt;
use std::path::Path;

use serde::Deserialize;
use taco_core::bench::BenchGrid;
use taco_core::infer::FitOptions;
use taco_core::prior::PriorConfig;
use taco_core::train::{Objective, TrainConfig};
use taco_core::{Error, ModelConfig};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_CAPACITY: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Capacity(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Capacity(m) => write!(f, "capacity exceeded: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Capacity(_) => EXIT_CAPACITY,
            CliError::Core(e) => match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Data(_) | Error::Schema(_) | Error::Csv(_) | Error::Io(_) | Error::CorruptCheckpoint(_) => {
                    EXIT_DATA
                }
                Error::Capacity { .. } => EXIT_CAPACITY,
                _ => EXIT_FAILURE,
            },
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub batches: usize,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self { batches: 1 }
    }
}

/// Contents of a `--config` TOML file. Every section is optional except
/// that training and prior export need `[prior]`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    pub prior: Option<PriorConfig>,
    /// Remaining `TrainConfig` fields (steps, peak_lr, rate_mode, ...).
    pub train: Option<toml::Table>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub bench: BenchGrid,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn prior_config(&self) -> Result<PriorConfig, CliError> {
        self.prior
            .clone()
            .ok_or_else(|| CliError::Config("missing field `prior`: add a [prior] section".into()))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let prior = self.prior_config()?;
        let mut table = self.train.clone().unwrap_or_default();
        for key in ["model", "prior"] {
            if table.contains_key(key) {
                return Err(CliError::Config(format!("[train] must not contain `{key}`; use a [{key}] section")));
            }
        }
        let model = self.model.clone().unwrap_or_default();
        table.insert("model".into(), to_toml(&model)?);
        table.insert("prior".into(), to_toml(&prior)?);
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Config(format!("[train]: {e}")))?;
        // Validated by the trainer once command-line overrides are applied.
        Ok(cfg)
    }
}

fn to_toml<T: serde::Serialize>(v: &T) -> Result<toml::Value, CliError> {
    toml::Value::try_from(v).map_err(|e| CliError::Config(e.to_string()))
}

pub fn parse_objective(s: &str) -> Result<Objective, CliError> {
    match s {
        "taco" => Ok(Objective::Taco),
        "pot" => Ok(Objective::Pot),
        other => Err(CliError::Config(format!("unknown objective {other:?}"))),
    }
}

/// Parses "N,M".
pub fn parse_pair(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("expected N,M, got {s:?}"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}
