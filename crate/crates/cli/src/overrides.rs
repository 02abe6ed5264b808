//! `--set key=value` overrides applied to the TOML form of a run config.

use toml::{Table, Value};
use zerodesk::pipeline::RunConfig;

/// TOML literal when `raw` parses as one, a bare string otherwise.
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key `{key}`"));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| format!("unknown key `{key}`"))?;
        node = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| format!("unknown key `{key}`"))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Applies each `key=value` in order; the first key the config rejects is
/// named in the error.
pub fn apply(cfg: &RunConfig, sets: &[String]) -> Result<RunConfig, String> {
    let mut value = Value::try_from(cfg).map_err(|e| e.to_string())?;
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| format!("--set expects key=value, got `{s}`"))?;
        let key = key.trim();
        set_path(&mut value, key, parse_value(raw.trim()))?;
        value
            .clone()
            .try_into::<RunConfig>()
            .map_err(|e| format!("--set {key}: {}", e.to_string().trim()))?;
    }
    value.try_into().map_err(|e: toml::de::Error| e.to_string())
}
