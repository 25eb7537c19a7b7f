//! Experiment configuration files, config hashing and presets.
//!
//! A config is a TOML document with an `env` selector and a `[train]` table
//! whose keys are the fields of [`TrainConfig`]:
//!
//! ```toml
//! env = "builtin:mountain_car"
//!
//! [train]
//! mode = "sdar"
//! seed = 3
//! hidden = [64, 64]
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::{BridgeHandle, BridgeOptions};
use crate::envs::{make_builtin, Environment, BUILTIN_NAMES};
use crate::error::{Error, Result};
use crate::trainer::{BetaUpdate, Mode, TrainConfig};

/// Where the environment comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EnvSelector {
    Builtin(String),
    /// Command line of a child process speaking the bridge protocol.
    Bridge(String),
}

impl FromStr for EnvSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(name) = s.strip_prefix("builtin:") {
            if !BUILTIN_NAMES.contains(&name) {
                return Err(Error::config(format!(
                    "unknown built-in environment '{name}' (expected one of {})",
                    BUILTIN_NAMES.join(", ")
                )));
            }
            Ok(EnvSelector::Builtin(name.to_owned()))
        } else if let Some(cmd) = s.strip_prefix("bridge:") {
            if cmd.trim().is_empty() {
                return Err(Error::config("bridge selector needs a command"));
            }
            Ok(EnvSelector::Bridge(cmd.trim().to_owned()))
        } else if BUILTIN_NAMES.contains(&s) {
            Ok(EnvSelector::Builtin(s.to_owned()))
        } else {
            Err(Error::config(format!(
                "environment '{s}' must be builtin:<name> or bridge:<command>"
            )))
        }
    }
}

impl fmt::Display for EnvSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvSelector::Builtin(n) => write!(f, "builtin:{n}"),
            EnvSelector::Bridge(c) => write!(f, "bridge:{c}"),
        }
    }
}

impl EnvSelector {
    /// Short name for run ids and tables.
    pub fn short_name(&self) -> String {
        match self {
            EnvSelector::Builtin(n) => n.clone(),
            EnvSelector::Bridge(c) => {
                let program = c.split_whitespace().next().unwrap_or("bridge");
                let base = Path::new(program)
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| program.to_owned());
                format!("bridge-{base}")
            }
        }
    }

    pub fn make(&self) -> Result<Box<dyn Environment>> {
        match self {
            EnvSelector::Builtin(n) => make_builtin(n),
            EnvSelector::Bridge(c) => Ok(Box::new(BridgeHandle::spawn(c, BridgeOptions::default())?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: "builtin:mountain_car".into(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.selector()?;
        self.train.validate()
    }

    pub fn selector(&self) -> Result<EnvSelector> {
        self.env.parse()
    }

    /// SHA-256 of the canonical JSON form (keys sorted), as hex.
    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// Hash of any serializable config. Object keys are sorted before hashing,
/// so documents that differ only in key order hash identically.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?.to_string();
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// One group of runs of a preset.
#[derive(Clone, Debug, PartialEq)]
pub struct PresetRun {
    pub label: &'static str,
    pub experiment: ExperimentConfig,
    pub seeds: Vec<u64>,
}

pub const PRESET_NAMES: [&str; 1] = ["paper-desk"];

/// Desk-scale acceptance runs: mountain car and the multi-rate point mass,
/// five seeds each, with 64-unit hidden layers. The point mass enumerates
/// schemas exactly in the selection update.
pub fn preset(name: &str) -> Result<Vec<PresetRun>> {
    match name {
        "paper-desk" => Ok(vec![
            PresetRun {
                label: "mountain_car",
                experiment: ExperimentConfig {
                    env: "builtin:mountain_car".into(),
                    train: TrainConfig {
                        mode: Mode::Sdar,
                        hidden: vec![64, 64],
                        total_steps: 100_000,
                        eval_every: 5000,
                        stop_at_return: Some(90.0),
                        ..TrainConfig::default()
                    },
                },
                seeds: (0..5).collect(),
            },
            PresetRun {
                label: "point_mass",
                experiment: ExperimentConfig {
                    env: "builtin:point_mass".into(),
                    train: point_mass_desk(),
                },
                seeds: (0..5).collect(),
            },
        ]),
        other => Err(Error::config(format!(
            "unknown preset '{other}' (expected one of {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}

fn point_mass_desk() -> TrainConfig {
    TrainConfig {
        mode: Mode::Sdar,
        beta_update: BetaUpdate::Exact,
        hidden: vec![64, 64],
        total_steps: 40_000,
        eval_every: 5000,
        ..TrainConfig::default()
    }
}
