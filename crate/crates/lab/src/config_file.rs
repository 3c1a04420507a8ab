//! TOML config files.
//!
//! A config is a flat TOML table of [`SchemeConfig`] fields with optional
//! `[data]`, `[model]`, `[optimizer]` and `[probe]` sections; every field has
//! a default, unknown keys are rejected. Example:
//!
//! ```toml
//! scheme = "simdis_on_7v"
//! epochs = 20
//! batch_size = 32
//! seed = 3
//!
//! [model]
//! teacher_encoder = "mini-resnet-16"
//! student_encoder = "mini-resnet-4"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use simdis_core::config::SchemeConfig;

use crate::error::{io_err, LabError, Result};

/// Overrides the default output root (`runs/`) for new run directories.
pub const RUN_DIR_ENV: &str = "SIMDIS_RUN_DIR";

/// Parses without validating, so callers can apply overrides first.
pub fn parse_config_raw(text: &str, origin: &Path) -> Result<SchemeConfig> {
    toml::from_str(text).map_err(|e| LabError::Parse {
        path: origin.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn parse_config(text: &str, origin: &Path) -> Result<SchemeConfig> {
    Ok(parse_config_raw(text, origin)?.validated()?)
}

pub fn load_config_raw(path: &Path) -> Result<SchemeConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config_raw(&text, path)
}

pub fn load_config(path: &Path) -> Result<SchemeConfig> {
    Ok(load_config_raw(path)?.validated()?)
}

pub fn config_to_toml(cfg: &SchemeConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| LabError::Run(format!("cannot serialize config: {e}")))
}

pub fn write_config(cfg: &SchemeConfig, path: &Path) -> Result<()> {
    fs::write(path, config_to_toml(cfg)?).map_err(io_err(path))
}

/// `explicit`, else `$SIMDIS_RUN_DIR`, else `runs`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(RUN_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs")),
    }
}
