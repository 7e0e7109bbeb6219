//! Flat `section.key = value` run configuration covering the model,
//! pretraining and head settings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::downstream::HeadConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub head: HeadConfig,
}

/// Parse `raw` into the JSON type of `current`.
fn parse_like(current: &Value, raw: &str, key: &str) -> Result<Value> {
    let bad = || Error::Config(format!("cannot parse `{raw}` for `{key}`"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad())?;
            Value::from(x)
        }
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::from(0u64));
            let parts = raw.split(',').map(str::trim).filter(|s| !s.is_empty());
            Value::Array(parts.map(|p| parse_like(&proto, p, key)).collect::<Result<_>>()?)
        }
        Value::String(_) => Value::String(raw.to_string()),
        _ => return Err(bad()),
    })
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(|x| x.to_string()).collect();
            out.push((prefix.to_string(), parts.join(",")));
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    /// Override one `section.field`; unknown keys are rejected.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let (section, field) =
            key.split_once('.').ok_or_else(|| Error::Config(format!("key `{key}` must look like section.field")))?;
        let slot = root
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(section))
            .and_then(|s| s.as_object_mut())
            .and_then(|s| s.get_mut(field))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        *slot = parse_like(slot, raw.trim(), key)?;
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        Ok(())
    }

    /// Apply `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults overridden by the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Every key with its resolved value, sorted.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out.sort();
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.head.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut c = RunConfig::default();
        c.set("train.lr_init", "0.002").unwrap();
        c.set("head.mlp1", "64, 48, 16").unwrap();
        c.set("head.mlp2", "18,8,3").unwrap();
        c.set("model.use_type_token", "false").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.head.mlp1, vec![64, 48, 16]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.set("train.nope", "1").is_err());
        assert!(c.set("nope.lr", "1").is_err());
        assert!(c.set("lr", "1").is_err());
        assert!(c.set("train.batch_size", "-3").is_err());
        assert!(c.set("train.batch_size", "1.5").is_err());
        assert!(c.apply_text("train.seed 3").is_err());
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn later_values_win() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\ntrain.seed = 3\n\ntrain.seed = 4 # trailing\n").unwrap();
        assert_eq!(c.train.seed, 4);
        c.set("train.seed", "9").unwrap();
        assert_eq!(c.train.seed, 9);
    }

    #[test]
    fn float_fields_accept_integers() {
        let mut c = RunConfig::default();
        c.set("head.lr", "1").unwrap();
        assert_eq!(c.head.lr, 1.0);
    }
}
