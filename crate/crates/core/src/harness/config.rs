use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agm::{AgmConfig, DecodeConfig};
use crate::alm::AlmConfig;
use crate::dataworld::{AugmentConfig, WorldConfig};
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training scenes held out (from the end of the split) for validation.
    pub validation_size: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
}

impl Default for AlmTrainConfig {
    fn default() -> Self {
        AlmTrainConfig {
            epochs: 16,
            batch_size: 16,
            validation_size: 200,
            optimizer: OptimizerConfig {
                warmup_steps: 50,
                ..OptimizerConfig::adam(2e-3)
            },
            augment: AugmentConfig::enabled(0.8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_size: usize,
    pub optimizer: OptimizerConfig,
    /// Fraction of epochs fed the noised gold selection; later epochs see
    /// the trained locator's selection.
    pub gold_fraction: f64,
    pub gold_drop_prob: f64,
    pub gold_insert_prob: f64,
    /// Probability of an empty selection segment.
    pub empty_selection_prob: f64,
    /// Probability of training on an OCR-corrupted copy of the scene.
    pub corruption_prob: f64,
    pub corruption_char_rate: f64,
}

impl Default for AgmTrainConfig {
    fn default() -> Self {
        AgmTrainConfig {
            epochs: 24,
            batch_size: 16,
            validation_size: 200,
            optimizer: OptimizerConfig {
                warmup_steps: 50,
                ..OptimizerConfig::adam(2e-3)
            },
            gold_fraction: 0.5,
            gold_drop_prob: 0.2,
            gold_insert_prob: 0.1,
            empty_selection_prob: 0.1,
            corruption_prob: 0.5,
            corruption_char_rate: 0.2,
        }
    }
}

impl AgmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gold_fraction", self.gold_fraction),
            ("gold_drop_prob", self.gold_drop_prob),
            ("gold_insert_prob", self.gold_insert_prob),
            ("empty_selection_prob", self.empty_selection_prob),
            ("corruption_prob", self.corruption_prob),
            ("corruption_char_rate", self.corruption_char_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("agm_train.{name} = {v} is outside [0, 1]")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("agm_train.batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// Everything a pipeline run depends on besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub alm: AlmConfig,
    pub alm_train: AlmTrainConfig,
    pub agm: AgmConfig,
    pub agm_train: AgmTrainConfig,
    pub decode: DecodeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            world: WorldConfig::default(),
            alm: AlmConfig::default(),
            alm_train: AlmTrainConfig::default(),
            agm: AgmConfig::default(),
            agm_train: AgmTrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.alm.encoder.validate()?;
        self.alm.loss.validate()?;
        self.agm.validate()?;
        self.alm_train.optimizer.validate()?;
        if self.alm_train.batch_size == 0 {
            return Err(Error::Config("alm_train.batch_size must be positive".into()));
        }
        self.agm_train.validate()
    }

    /// Reads a TOML file (missing keys take defaults) and applies
    /// `key.path=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it
/// parses as one and as a plain string otherwise.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
