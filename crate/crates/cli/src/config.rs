//! The run configuration: one TOML file with `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use plume_core::config::{ModelConfig, TargetConfig};
use plume_core::features::ValidationRules;
use plume_core::training::TrainConfig;
use plume_synth::SynthConfig;

use crate::error::{CliError, Result};

/// Named starting points for the model section.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelProfile {
    /// Full-size architecture.
    #[default]
    Default,
    /// Narrower layers and 12 input hours.
    Desk,
    /// Toy geometry with 3-hour windows.
    Tiny,
}

impl ModelProfile {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelProfile::Default => ModelConfig::default(),
            ModelProfile::Desk => ModelConfig::desk(),
            ModelProfile::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    /// Hours between consecutive patch start times.
    pub t0_stride_h: usize,
    /// Upper bound on patches per split (0: keep all), chosen by a seeded draw.
    pub max_per_split: usize,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            t0_stride_h: 6,
            max_per_split: 0,
            seed: 42,
        }
    }
}

/// Default locations used when a command-line path is omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub patches: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model_profile: ModelProfile,
    pub model: ModelConfig,
    pub targets: TargetConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub patches: PatchConfig,
    pub validation: ValidationRules,
    pub paths: Paths,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
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

fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `section.key=value` (dotted paths, TOML literal values; bare
/// words are taken as strings).
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let mut node = doc;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?} descends into a non-table")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override {key:?} descends into a non-table")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads `path` (defaults when absent), applies overrides, then fills the
    /// model section from the chosen profile.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let table: toml::Table =
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::to_value(table).map_err(|e| CliError::Config(e.to_string()))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc)
    }

    pub fn from_value(mut doc: Value) -> Result<Self> {
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| CliError::Config("configuration must be a table".into()))?;
        let profile: ModelProfile = match obj.get("model_profile") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("model_profile: {e}")))?,
            None => ModelProfile::Default,
        };
        let mut model = serde_json::to_value(profile.config()).expect("model config serializes");
        if let Some(user) = obj.remove("model") {
            merge(&mut model, user);
        }
        obj.insert("model".into(), model);
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.synth.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.patches.t0_stride_h == 0 {
            return Err(CliError::Config("patches.t0_stride_h must be positive".into()));
        }
        if self.train.resolution_weights.len() != self.model.output_grids().len() {
            return Err(CliError::Config(format!(
                "train.resolution_weights has {} entries, the model has {} output grids",
                self.train.resolution_weights.len(),
                self.model.output_grids().len()
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_else(|e| format!("# not representable as TOML: {e}\n"))
    }
}
