use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use pairalign::detector::DetectorConfig;
use pairalign::synthgen::SynthConfig;
use pairalign::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::Invalid;

pub const CONFIG_SCHEMA: &str = "pairalign.config.v1";

/// Everything a command needs besides paths: the benchmark, the detector
/// shape and the training settings. Missing sections take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA.into(),
            synth: SynthConfig::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Parses `text`, reporting every unknown key at once.
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Invalid(format!("not valid JSON: {e}")))?;
        let unknown = unknown_keys(&value, &serde_json::to_value(Self::default())?, "");
        if !unknown.is_empty() {
            return Err(Invalid(format!("unknown config keys: {}", unknown.join(", "))).into());
        }
        let config: Self = serde_json::from_value(value).map_err(|e| Invalid(e.to_string()))?;
        if config.schema != CONFIG_SCHEMA {
            return Err(Invalid(format!("config schema {:?}, expected {CONFIG_SCHEMA:?}", config.schema)).into());
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for r in [self.synth.validate(), self.detector.validate(), self.train.validate()] {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        }
        if self.synth.classes != self.detector.classes {
            problems.push(format!(
                "synth.classes {} differs from detector.classes {}",
                self.synth.classes, self.detector.classes
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Invalid(problems.join("; ")).into())
        }
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Dotted paths of object keys in `value` that `reference` lacks. Objects
/// are compared recursively; arrays and scalars are leaves.
fn unknown_keys(value: &Value, reference: &Value, prefix: &str) -> Vec<String> {
    let (Value::Object(v), Value::Object(r)) = (value, reference) else {
        return Vec::new();
    };
    let known: BTreeSet<&String> = r.keys().collect();
    let mut out = Vec::new();
    for (k, child) in v {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if known.contains(k) {
            out.extend(unknown_keys(child, &r[k], &path));
        } else {
            out.push(path);
        }
    }
    out
}
