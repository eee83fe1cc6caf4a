//! TOML run configuration: loading, `dotted.key=value` overrides and a stable
//! content hash.

use std::path::Path;

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::cells::PopulationSource;
use crate::error::{Error, Result};
use crate::sim::SimConfig;

fn config_err(key: Option<String>, line: Option<usize>, message: impl Into<String>) -> Error {
    Error::Config {
        key,
        line,
        message: message.into(),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// First backquoted name in a serde message, e.g. ``missing field `rain` ``.
fn quoted_key(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let end = start + message[start..].find('`')?;
    Some(message[start..end].to_string())
}

/// Dotted path of the table header or key on the error's line, if any.
fn key_at_line(text: &str, line: usize) -> Option<String> {
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let l = raw.trim();
        if l.starts_with('[') {
            section = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if i + 1 == line {
            if l.starts_with('[') || l.is_empty() {
                return (!section.is_empty()).then_some(section);
            }
            let key = l.split('=').next()?.trim();
            return Some(if section.is_empty() { key.to_string() } else { format!("{section}.{key}") });
        }
    }
    None
}

fn from_de_error(text: &str, e: &toml::de::Error) -> Error {
    let message = e.message().to_string();
    let line = e.span().map(|s| line_of(text, s.start));
    if message.starts_with("missing field") {
        // The span covers the enclosing table, not a useful line.
        return config_err(quoted_key(&message), None, message);
    }
    let key = if message.starts_with("unknown field") {
        quoted_key(&message)
    } else {
        line.and_then(|l| key_at_line(text, l)).or_else(|| quoted_key(&message))
    };
    config_err(key, line, message)
}

/// Parse and validate a configuration, then apply `overrides` in order.
pub fn parse(text: &str, overrides: &[String]) -> Result<SimConfig> {
    let mut table: Table = text.parse().map_err(|e: toml::de::Error| from_de_error(text, &e))?;
    // Report schema errors against the file as written, with line numbers.
    let mut cfg = SimConfig::deserialize_from(text)?;
    // Check after every override so a bad value is blamed on its key.
    for o in overrides {
        apply_override(&mut table, o)?;
        let key = o.split_once('=').map(|(k, _)| k.trim().to_string());
        cfg = Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| config_err(key, None, e.message().to_string()))?;
    }
    cfg.validate().map_err(|e| match e {
        Error::Config { .. } => e,
        other => config_err(None, None, other.to_string()),
    })?;
    Ok(cfg)
}

impl SimConfig {
    fn deserialize_from(text: &str) -> Result<SimConfig> {
        toml::from_str(text).map_err(|e| from_de_error(text, &e))
    }
}

/// Read a configuration file. Relative population CSV paths are taken
/// relative to the file's directory.
pub fn load(path: &Path, overrides: &[String]) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(None, None, format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = parse(&text, overrides)?;
    if let PopulationSource::Csv { path: p } = &mut cfg.grid.population {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    Ok(cfg)
}

/// Value of an override: any TOML value, or a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Apply one `dotted.key=value` override. Numeric path segments index into
/// arrays, e.g. `constellation.shells.0.beams=8`.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(Some(spec.to_string()), None, "override must look like key=value"))?;
    let path = path.trim();
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(Some(path.to_string()), None, "empty key segment"));
    }
    let bad = |msg: &str| config_err(Some(path.to_string()), None, msg.to_string());
    let mut cur: &mut Value = table
        .entry(parts[0].to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    for part in &parts[1..] {
        cur = match cur {
            Value::Table(t) => t.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new())),
            Value::Array(a) => {
                let i: usize = part.parse().map_err(|_| bad("array segments must be indices"))?;
                a.get_mut(i).ok_or_else(|| bad("array index out of range"))?
            }
            _ => return Err(bad("cannot descend into a scalar")),
        };
    }
    *cur = parse_value(raw.trim());
    Ok(())
}

/// Canonical TOML text of a configuration.
pub fn canonical(cfg: &SimConfig) -> String {
    toml::to_string(cfg).expect("configuration serialises")
}

/// SHA-256 of the canonical text, hex encoded.
pub fn config_hash(cfg: &SimConfig) -> String {
    hex::encode(Sha256::digest(canonical(cfg).as_bytes()))
}
