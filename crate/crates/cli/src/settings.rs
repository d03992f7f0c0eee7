//! Layered configuration: preset, then TOML file, then command-line flags.

use std::path::Path;

use qfd_core::config::RunConfig;
use serde::Deserialize;
use thiserror::Error;

pub const RESOLVED: &str = "resolved-config.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("unknown preset {0:?} (expected standard, reduced or tiny)")]
    Preset(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot write resolved configuration: {0}")]
    Write(String),
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn to_toml(cfg: &RunConfig) -> Result<String, ConfigError> {
    toml::to_string_pretty(cfg).map_err(|e| ConfigError::Write(e.to_string()))
}

/// Builds a configuration from `preset` (flag), the file's own `preset` key,
/// or `standard`, in that order, with the file's keys layered on top.
pub fn load_config(file: Option<&Path>, preset: Option<&str>) -> Result<RunConfig, ConfigError> {
    let mut overlay = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.display().to_string(),
                source,
            })?;
            text.parse::<toml::Table>().map_err(|e| ConfigError::Parse {
                path: p.display().to_string(),
                msg: e.to_string(),
            })?
        }
        None => toml::Table::new(),
    };
    let file_preset = match overlay.remove("preset") {
        Some(toml::Value::String(s)) => Some(s),
        Some(other) => {
            return Err(ConfigError::Parse {
                path: file.map_or(String::new(), |p| p.display().to_string()),
                msg: format!("preset must be a string, got {other}"),
            })
        }
        None => None,
    };
    let name = preset.map(str::to_owned).or(file_preset).unwrap_or_else(|| "standard".into());
    let base_cfg = RunConfig::preset(&name).ok_or(ConfigError::Preset(name))?;
    let mut base = toml::Value::try_from(&base_cfg).map_err(|e| ConfigError::Write(e.to_string()))?;
    merge(&mut base, toml::Value::Table(overlay));
    RunConfig::deserialize(base).map_err(|e| ConfigError::Parse {
        path: file.map_or("<preset>".into(), |p| p.display().to_string()),
        msg: e.to_string(),
    })
}

/// Writes the fully resolved configuration next to an output.
pub fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<(), ConfigError> {
    let text = to_toml(cfg)?;
    std::fs::write(dir.join(RESOLVED), text).map_err(|e| ConfigError::Write(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_preset_and_resolved_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "preset = \"tiny\"\nper_class = 3\n[train]\nlambda = 5.0\n").unwrap();
        let c = load_config(Some(&p), None).unwrap();
        assert_eq!(c.per_class, 3);
        assert_eq!(c.train.lambda, 5.0);
        assert_eq!(c.window_len, 16);

        write_resolved(&c, dir.path()).unwrap();
        let again = load_config(Some(&dir.path().join(RESOLVED)), Some("standard")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nlamda = 5.0\n").unwrap();
        let e = load_config(Some(&p), None).unwrap_err().to_string();
        assert!(e.contains("lamda"), "{e}");
        std::fs::write(&p, "colour = 1\n").unwrap();
        assert!(load_config(Some(&p), None).is_err());
        assert!(matches!(load_config(None, Some("huge")), Err(ConfigError::Preset(_))));
    }
}
