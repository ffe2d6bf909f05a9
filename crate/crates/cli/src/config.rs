//! Run configuration: JSON file, then `--set` overrides, then `--seed`.

use std::path::Path;

use ren::train::{DataConfig, TrainConfig};
use ren::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Defaults, overlaid with the file (if any) and then each `key=value`
    /// override. Every key must name an existing field.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, file, "")?;
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(base: &mut Value, patch: Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// Apply one `dotted.key=value`; the value is read as JSON, falling back to a
/// plain string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *slot = value;
    Ok(())
}
