//! Versioned JSON configuration files.

use std::path::Path;

use aoi_nest::model::{Mode, ServerGroup, SystemConfig, UserGroup};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const SCHEMA_VERSION: u64 = 1;

const KNOWN: [&str; 9] =
    ["schema_version", "mode", "user_groups", "server_groups", "horizon", "seed", "beta", "a_max", "tail_window"];

/// On-disk form of a [`SystemConfig`]. Missing optional fields take the
/// library defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigFile {
    pub schema_version: u64,
    pub mode: Mode,
    pub user_groups: Vec<UserGroup>,
    pub server_groups: Vec<ServerGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_max: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_window: Option<u64>,
}

impl ConfigFile {
    pub fn resolve(self) -> Result<SystemConfig, CliError> {
        let mut cfg = SystemConfig::new(self.user_groups, self.server_groups, self.mode);
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(a) = self.a_max {
            cfg.a_max = a;
        }
        if let Some(t) = self.tail_window {
            cfg.tail_window = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved form of `cfg`, as embedded in artifact headers.
    pub fn from_config(cfg: &SystemConfig) -> Self {
        ConfigFile {
            schema_version: SCHEMA_VERSION,
            mode: cfg.mode,
            user_groups: cfg.user_groups.clone(),
            server_groups: cfg.server_groups.clone(),
            horizon: Some(cfg.horizon),
            seed: Some(cfg.seed),
            beta: Some(cfg.beta),
            a_max: Some(cfg.a_max),
            tail_window: Some(cfg.tail_window),
        }
    }
}

/// Parses a config document. Unknown top-level keys are returned as
/// warnings rather than rejected.
pub fn parse_config(text: &str) -> Result<(SystemConfig, Vec<String>), CliError> {
    if text.trim().is_empty() {
        return Err(CliError::Schema("empty document".into()));
    }
    let value: Value = serde_json::from_str(text).map_err(|e| CliError::Schema(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| CliError::Schema("top level must be an object".into()))?;
    match obj.get("schema_version").and_then(Value::as_u64) {
        Some(SCHEMA_VERSION) => {}
        Some(v) => return Err(CliError::Schema(format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})"))),
        None => return Err(CliError::Schema("missing field `schema_version`".into())),
    }
    let warnings = obj
        .keys()
        .filter(|k| !KNOWN.contains(&k.as_str()))
        .map(|k| format!("unknown field `{k}` ignored"))
        .collect();
    let file: ConfigFile = serde_json::from_value(value).map_err(|e| CliError::Schema(e.to_string()))?;
    Ok((file.resolve()?, warnings))
}

/// Reads a config from a JSON file, or from the `# config:` header line of
/// an artifact written by this tool.
pub fn load_config(path: &Path) -> Result<SystemConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let body = match header_field(&text, "config") {
        Some(json) => json.to_string(),
        None => text,
    };
    let (cfg, warnings) = parse_config(&body)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(cfg)
}

/// Value of a `# name: ...` line at the top of an artifact.
pub fn header_field<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let prefix = format!("# {name}: ");
    text.lines().take_while(|l| l.starts_with('#')).find_map(|l| l.strip_prefix(prefix.as_str()))
}
