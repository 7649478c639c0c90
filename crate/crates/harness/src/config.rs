//! Engine configuration files, JSON or TOML by extension.

use std::path::Path;

use anyhow::{bail, Context, Result};
use aqp_core::EngineConfig;

pub fn load_config(path: &Path) -> Result<EngineConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let cfg: EngineConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).with_context(|| format!("invalid TOML in {}", path.display()))?,
        Some("json") => serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))?,
        other => bail!("{}: config must end in .json or .toml, not {other:?}", path.display()),
    };
    cfg.validate()?;
    Ok(cfg)
}
