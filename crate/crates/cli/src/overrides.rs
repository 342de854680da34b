//! Dotted-path overrides (`reward.lambda_TO=10`) applied to a config's JSON
//! form after defaults are filled in.

use gaitspeed_core::config::ExperimentConfig;
use gaitspeed_core::Error;
use serde_json::Value;

/// Splits `path=value`. The value is parsed as JSON when possible and kept as
/// a string otherwise, so `mode=speed_horizon` needs no quoting.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value), Error> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form path=value")))?;
    let path: Vec<String> = path.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override `{text}` has an empty path segment")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((path, value))
}

/// Replaces the value at `path`; the path must already exist.
pub fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<(), Error> {
    let joined = path.join(".");
    let mut node = root;
    for key in path {
        node = match node {
            Value::Object(map) => map.get_mut(key),
            Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("override path `{joined}` does not exist")))?;
    }
    *node = value;
    Ok(())
}

pub fn apply_overrides(root: &mut Value, overrides: &[String]) -> Result<(), Error> {
    for text in overrides {
        let (path, value) = parse_override(text)?;
        set_path(root, &path, value)?;
    }
    Ok(())
}

/// Parses a config document, applies overrides and validates the result.
pub fn config_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig, Error> {
    let parsed: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if overrides.is_empty() {
        parsed.validate()?;
        return Ok(parsed);
    }
    let mut value = serde_json::to_value(&parsed)?;
    apply_overrides(&mut value, overrides)?;
    let config: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}
