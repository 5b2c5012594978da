//! Run configuration: one JSON document with a section per module, dotted
//! command-line overrides and the effective-config echo.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::inversion::InversionConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Seed of the parameter initialisation stream.
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Checkpoint read by `invert`, `erase`, `reconstruct` and `sweep`.
    pub ckpt: Option<PathBuf>,
    /// Inversion bundle read by `erase` and `reconstruct`.
    pub bundle: Option<PathBuf>,
    /// Scene seed for `invert`; first scene seed for `sweep`.
    pub scene_seed: u64,
    /// Draw scenes with exactly two objects.
    pub two_object_scenes: bool,
    /// Number of consecutive scene seeds in a sweep.
    pub scenes: usize,
    /// Swept parameter: a field of `guidance` or a dotted path.
    pub sweep_param: String,
    pub sweep_values: Vec<f64>,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            ckpt: None,
            bundle: None,
            scene_seed: 1000,
            two_object_scenes: false,
            scenes: 16,
            sweep_param: "lambda".into(),
            sweep_values: vec![0.2, 0.5, 0.8, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inversion: InversionConfig,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::new(self.schedule).map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.train.validate()?;
        self.inversion.validate()?;
        self.guidance.validate()?;
        if self.io.scenes == 0 {
            return Err(Error::Config("io.scenes must be positive".into()));
        }
        Ok(())
    }

    /// Parses a JSON document, applies `overrides` (dotted path, raw value)
    /// in order and validates the result.
    pub fn from_json(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: Value = match text {
            Some(t) => serde_json::from_str(t).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?,
            None => Value::Object(Default::default()),
        };
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let defaults = serde_json::to_value(RunConfig::default())?;
        for (path, raw) in overrides {
            apply_override(&mut doc, &defaults, path, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            ),
            None => None,
        };
        Self::from_json(text.as_deref(), overrides)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule)
    }
}

/// Interprets `raw` by the type of the default value at `path`: strings and
/// optional paths take the text verbatim, lists accept comma-separated
/// items, everything else is parsed as JSON.
fn parse_raw(default: Option<&Value>, raw: &str) -> Result<Value> {
    let as_json = || serde_json::from_str::<Value>(raw).map_err(|_| Error::Config(format!("cannot parse value {raw:?}")));
    match default {
        Some(Value::String(_)) | Some(Value::Null) => Ok(Value::String(raw.to_string())),
        Some(Value::Array(items)) => {
            if raw.trim_start().starts_with('[') {
                return as_json();
            }
            let strings = matches!(items.first(), Some(Value::String(_))) || items.is_empty();
            raw.split(',')
                .map(|p| {
                    let p = p.trim();
                    if strings {
                        Ok(Value::String(p.to_string()))
                    } else {
                        serde_json::from_str(p).map_err(|_| Error::Config(format!("cannot parse list item {p:?}")))
                    }
                })
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        _ => as_json(),
    }
}

/// Sets `doc[path] = raw`, creating intermediate objects. Unknown paths are
/// left for deserialisation to reject.
pub fn apply_override(doc: &mut Value, defaults: &Value, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override path {path:?}")));
    }
    let default = keys.iter().try_fold(defaults, |v, k| v.get(*k));
    let value = parse_raw(default, raw)?;
    let mut cur = doc;
    for k in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path}: {k} is not a section")))?;
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {path}: parent is not a section")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
