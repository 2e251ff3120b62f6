use std::fs;
use std::path::Path;

use anyhow::Context;
use gaze_core::pipeline::RunConfig;
use gaze_core::GazeError;
use serde_json::Value;

/// Reads a TOML run configuration layered over a named profile.
///
/// The file may name its base with a top-level `profile = "..."` key;
/// `profile_override` wins over it. Keys absent from the file keep the
/// profile's values, keys unknown to the schema are rejected.
pub fn load(path: Option<&Path>, profile_override: Option<&str>) -> anyhow::Result<RunConfig> {
    let mut overlay = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let v: toml::Value = toml::from_str(&text).map_err(|e| {
                GazeError::Config(format!("{}: {}", p.display(), e.message()))
            })?;
            serde_json::to_value(v)?
        }
        None => Value::Object(Default::default()),
    };
    let file_profile = overlay
        .as_object_mut()
        .and_then(|m| m.remove("profile"))
        .and_then(|v| v.as_str().map(str::to_owned));
    let profile = profile_override
        .map(str::to_owned)
        .or(file_profile)
        .unwrap_or_else(|| "desk".into());
    let mut base = serde_json::to_value(RunConfig::profile(&profile)?)?;
    merge(&mut base, &overlay, "")?;
    let cfg: RunConfig =
        serde_json::from_value(base).map_err(|e| GazeError::Config(format!("config: {e}")))?;
    Ok(cfg)
}

fn merge(base: &mut Value, overlay: &Value, prefix: &str) -> Result<(), GazeError> {
    let Value::Object(over) = overlay else {
        *base = overlay.clone();
        return Ok(());
    };
    let Value::Object(dst) = base else {
        return Err(GazeError::Config(format!("{prefix} is not a table")));
    };
    for (k, v) in over {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match dst.get_mut(k) {
            Some(slot) if slot.is_object() => merge(slot, v, &path)?,
            Some(slot) => *slot = v.clone(),
            None => return Err(GazeError::Config(format!("unknown config key {path}"))),
        }
    }
    Ok(())
}

/// A profile rendered as TOML, for `gaze config`.
pub fn render(cfg: &RunConfig) -> anyhow::Result<String> {
    let mut v = serde_json::to_value(cfg)?;
    strip_nulls(&mut v);
    Ok(toml::to_string_pretty(&v)?)
}

fn strip_nulls(v: &mut Value) {
    if let Value::Object(m) = v {
        m.retain(|_, x| !x.is_null());
        m.values_mut().for_each(strip_nulls);
    }
}
