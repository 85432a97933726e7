//! Plain-text `key = value` run configuration with dotted keys
//! (`model.dim = 64`) and command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::DataConfig;
use crate::distill::DistillConfig;
use crate::eval::{Budget, EvalConfig};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub budget: Budget,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk_test();
        let data = DataConfig { width: model.frame_width, height: model.frame_height, ..DataConfig::default() };
        Self {
            model,
            data,
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            budget: Budget::default(),
        }
    }
}

/// Parse `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Coerce `raw` to the JSON type of the value it replaces.
fn coerce(key: &str, old: &Value, raw: &str) -> Result<Value> {
    let bad = || Error::Config(format!("{key}: cannot use {raw:?} here"));
    Ok(match old {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_f64() => serde_json::Number::from_f64(raw.parse().map_err(|_| bad())?)
            .map(Value::Number)
            .ok_or_else(bad)?,
        Value::Number(_) => match raw.parse::<u64>() {
            Ok(u) => Value::from(u),
            Err(_) => match raw.parse::<i64>() {
                Ok(i) => Value::from(i),
                Err(_) => Value::from(raw.parse::<f64>().map_err(|_| bad())?),
            },
        },
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string())))
                .collect(),
        ),
        _ => serde_json::from_str(raw).map_err(|_| bad())?,
    })
}

impl RunConfig {
    /// Apply dotted-key overrides in order; later keys win.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for (key, raw) in pairs {
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
            }
            *slot = coerce(key, slot, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file (if any), then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_pairs(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::default().with_overrides(&pairs)
    }

    /// Flattened `key = value` text that loads back to `self`.
    pub fn to_text(&self) -> Result<String> {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut flat);
        Ok(flat.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(o) => {
            for (k, v) in o {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        Value::Array(a) => {
            let items: Vec<String> = a.iter().map(|x| x.as_str().map_or_else(|| x.to_string(), str::to_string)).collect();
            out.insert(prefix.to_string(), items.join(","));
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Split `key=value` command-line arguments.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    args.iter()
        .map(|a| {
            a.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override {a:?} is not key=value")))
        })
        .collect()
}
