//! Run-config documents: JSON file loading and dotted `key=value` overrides.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::trainer::{RunConfig, CONFIG_VERSION};

/// Parses a run-config JSON document. Missing fields take their defaults,
/// unknown fields are rejected.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    from_value(value)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

fn from_value(value: Value) -> Result<RunConfig> {
    if let Some(v) = value.get("version") {
        let found = v
            .as_u64()
            .ok_or_else(|| Error::Config(format!("version must be an integer, got {v}")))?;
        if found != CONFIG_VERSION as u64 {
            return Err(Error::IncompatibleVersion {
                found: found as u32,
                supported: CONFIG_VERSION,
            });
        }
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(n) if n.is_f64() => "float",
        Value::Number(_) => "integer",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Override value text is read as JSON when it parses, else as a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn compatible(old: &Value, new: &Value) -> bool {
    match (kind(old), kind(new)) {
        ("null", _) => true,
        ("float", "integer") => true,
        (a, b) => a == b,
    }
}

/// Applies `a.b.c=value` overrides to `cfg`. Keys must already exist in the
/// schema and values must match the existing type.
pub fn apply_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(cfg)?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        let value = parse_value(raw);
        if !compatible(slot, &value) {
            return Err(Error::Config(format!(
                "{key} expects {}, got {} {raw:?}",
                kind(slot),
                kind(&value)
            )));
        }
        *slot = value;
    }
    from_value(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> Result<RunConfig> {
        let v: Vec<String> = items.iter().map(|s| s.to_string()).collect();
        apply_overrides(&RunConfig::default(), &v)
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(parse_config("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            parse_config(r#"{"optim": {"lr": 1}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(set(&["optim.lr=1"]), Err(Error::Config(_))));
        assert!(matches!(set(&["nothing=1"]), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_version() {
        assert!(matches!(
            parse_config(r#"{"version": 9}"#),
            Err(Error::IncompatibleVersion { found: 9, .. })
        ));
    }

    #[test]
    fn overrides_are_typed() {
        let c = set(&["optim.epochs=3", "loss.lambda_r=0", "model.activation=relu"]).unwrap();
        assert_eq!(c.optim.epochs, 3);
        assert_eq!(c.loss.lambda_r, 0.0);
        assert!(matches!(set(&["optim.epochs=fast"]), Err(Error::Config(_))));
        assert!(matches!(set(&["optim.epochs=1.5"]), Err(Error::Config(_))));
        assert!(matches!(set(&["optim"]), Err(Error::Config(_))));
    }

    #[test]
    fn null_fields_accept_values() {
        let c = set(&["data.train=feats.cofi"]).unwrap();
        assert_eq!(c.data.train.unwrap().to_str(), Some("feats.cofi"));
    }

    #[test]
    fn overrides_are_validated() {
        assert!(matches!(set(&["model.grades=4"]), Err(Error::Config(_))));
        let c = set(&[
            "model.grades=4",
            "grading.grade_span=1.75",
            "grading.sub_grade_span=0.175",
        ])
        .unwrap();
        assert_eq!(c.grading.grades(), 4);
    }
}
