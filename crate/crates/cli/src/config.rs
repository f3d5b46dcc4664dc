//! Run configuration: a TOML file, `--set section.key=value` overrides and
//! the master seed.

use std::path::Path;

use kite_core::datasets::StsConfig;
use kite_core::fixtures::FixtureConfig;
use kite_core::kg::{IdMap, TransEConfig};
use kite_core::model::ModelConfig;
use kite_core::training::{FinetuneConfig, PretrainConfig};
use kite_core::{CoreError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSettings {
    pub min_count: u64,
}

impl Default for VocabSettings {
    fn default() -> Self {
        VocabSettings { min_count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSettings {
    pub test_drug_fraction: f64,
    pub folds: usize,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings {
            test_drug_fraction: 0.2,
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub batch_size: usize,
    /// Token-length bin width for `seqlen`.
    pub bin_width: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            batch_size: 64,
            bin_width: 10,
        }
    }
}

/// Every configurable value of every subcommand. The section seeds are
/// replaced by the master seed before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub fixture: FixtureConfig,
    pub vocab: VocabSettings,
    pub kg: IdMap,
    pub transe: TransEConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub split: SplitSettings,
    pub sts: StsConfig,
    pub eval: EvalSettings,
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CoreError::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CoreError::Config(format!("override key {key:?} is malformed")));
    }
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for s in sections {
        let entry = node
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CoreError::Config(format!("override key {key:?}: {s} is not a section")))?;
    }
    node.insert(last.to_string(), override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// File (if any), then overrides in order, then the seed flag.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CoreError::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config = RunConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| CoreError::Config(e.message().to_string()))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        config.pretrain.seed = config.seed;
        config.finetune.seed = config.seed;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Config(format!("cannot serialize config: {e}")))
    }
}
