//! TOML configuration with dotted `key=value` overrides.
//!
//! ```toml
//! [model]
//! hidden = 64
//! embedding_mode = "speaker"
//!
//! [train]
//! steps = 500
//! mask_rate_range = [0.2, 1.0]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use tbve_core::model::ModelConfig;
use tbve_core::training::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`embedding_mode=speaker`).
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override '{spec}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("override key '{key}' is malformed")));
    }
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("override '{key}': '{p}' is not a section")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (if any), applies `overrides` in order and then `seed`.
/// Unknown keys anywhere are rejected.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<CliConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(seed) = seed {
        apply_override(&mut table, &format!("train.seed={seed}"))?;
    }
    let cfg: CliConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::usage(format!("config: {}", e.message())))?;
    cfg.model.validate().map_err(CliError::from)?;
    cfg.train.validate().map_err(CliError::from)?;
    Ok(cfg)
}
