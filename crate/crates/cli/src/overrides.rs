use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets the dotted `path` (e.g. `losses.weights.l1`) in `root`.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("malformed config key `{path}`");
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{path}`: `{key}` is not inside a table"))?;
        node = table.entry(key.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| anyhow!("`{path}` does not name a table field"))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Applies `key=value` assignments to a config through its TOML form, so
/// every config key can be set from the command line.
pub fn apply<T: Serialize + DeserializeOwned>(config: &T, assignments: &[(String, String)]) -> Result<T> {
    if assignments.is_empty() {
        return Ok(toml::Value::try_from(config)?.try_into()?);
    }
    let mut root = Value::try_from(config).context("config does not serialize")?;
    for (key, raw) in assignments {
        set_path(&mut root, key, parse_value(raw))?;
    }
    let keys: Vec<&str> = assignments.iter().map(|(k, _)| k.as_str()).collect();
    root.try_into().with_context(|| format!("invalid value for {}", keys.join(", ")))
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use muralfill_core::training::TrainConfig;

    fn set(pairs: &[(&str, &str)]) -> Result<TrainConfig> {
        let owned: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        apply(&TrainConfig::default(), &owned)
    }

    #[test]
    fn nested_and_optional_keys() {
        let cfg = set(&[
            ("lr_g", "0.002"),
            ("losses.weights.l1", "3"),
            ("stage2.batch", "4"),
            ("grad_clip", "1.5"),
            ("data.masks_dir", "/tmp/m"),
            ("model.g1.base_channels", "16"),
        ])
        .unwrap();
        assert_eq!(cfg.lr_g, 0.002);
        assert_eq!(cfg.losses.weights.l1, 3.0);
        assert_eq!(cfg.stage2.batch, 4);
        assert_eq!(cfg.grad_clip, Some(1.5));
        assert_eq!(cfg.data.masks_dir.as_deref(), Some(std::path::Path::new("/tmp/m")));
        assert_eq!(cfg.model.g1.base_channels, 16);
    }

    #[test]
    fn unknown_and_mistyped_keys_fail() {
        assert!(set(&[("lr_gg", "1")]).is_err());
        assert!(set(&[("stage1.batch", "many")]).is_err());
        assert!(set(&[("lr_g.x", "1")]).is_err());
        assert!(parse_assignment("novalue").is_err());
    }
}
