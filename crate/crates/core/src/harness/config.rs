//! Run configuration: a TOML file validated up front, with dotted-key
//! overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{AuxTerms, DistillConfig};
use crate::env::{AchievementEnv, BanditEnv, KeychainConfig, KeychainEnv, ScriptedConfig, ScriptedEnv};
use crate::error::{Error, Result};
use crate::net::{NetConfig, SizeProfile};
use crate::ppo::PpoConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    Keychain(KeychainConfig),
    Scripted(ScriptedConfig),
    Bandit { arms: usize, best: usize },
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::Keychain(KeychainConfig::default())
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn AchievementEnv>> {
        Ok(match self {
            Self::Keychain(c) => Box::new(KeychainEnv::new(c.clone())?),
            Self::Scripted(c) => Box::new(ScriptedEnv::new(c.clone())?),
            Self::Bandit { arms, best } => Box::new(BanditEnv::new(*arms, *best)?),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain PPO; no auxiliary phase, zero memory.
    Ppo,
    /// PPO alternating with auxiliary phases, terms chosen by the ablation
    /// switches.
    #[default]
    Distill,
}

/// Ablation switches: next-achievement prediction, cross-episode matching,
/// achievement memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub prediction: bool,
    pub matching: bool,
    pub memory: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            prediction: true,
            matching: true,
            memory: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub ablation: Ablation,
    pub profile: SizeProfile,
    /// Explicit network shape; overrides `profile` when present.
    pub net: Option<NetConfig>,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub distill: DistillConfig,
    /// Checkpoint after every this many outer phases; 0 disables
    /// intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Trailing window for reward and windowed success, as a fraction of
    /// `total_steps`.
    pub window_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 1_000_000,
            output_dir: PathBuf::from("runs/default"),
            mode: Mode::Distill,
            ablation: Ablation::default(),
            profile: SizeProfile::Tiny,
            net: None,
            env: EnvConfig::default(),
            ppo: PpoConfig::default(),
            distill: DistillConfig::default(),
            checkpoint_every: 1,
            window_fraction: 0.1,
        }
    }
}

impl RunConfig {
    pub fn net_config(&self) -> NetConfig {
        self.net.clone().unwrap_or_else(|| self.profile.config())
    }

    /// Auxiliary terms in effect; all off in plain PPO mode.
    pub fn aux_terms(&self) -> AuxTerms {
        match self.mode {
            Mode::Ppo => AuxTerms {
                prediction: false,
                matching: false,
                memory: false,
            },
            Mode::Distill => AuxTerms {
                prediction: self.ablation.prediction,
                matching: self.ablation.matching,
                memory: self.ablation.memory,
            },
        }
    }

    pub fn window_steps(&self) -> u64 {
        ((self.total_steps as f64 * self.window_fraction).round() as u64).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.distill.validate()?;
        self.net_config().validate()?;
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return Err(Error::Config("window_fraction must lie in (0, 1]".into()));
        }
        match &self.env {
            EnvConfig::Keychain(c) => c.validate(),
            EnvConfig::Scripted(c) => c.validate(),
            EnvConfig::Bandit { .. } => Ok(()),
        }?;
        self.env.build().map(|_| ())
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a hash of the serialized config, for diagnostics.
    pub fn hash(&self) -> u64 {
        self.to_toml().bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// Sets `a.b.c=value`, parsing the value as TOML and falling back to a
/// plain string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key}: parent is not a table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
