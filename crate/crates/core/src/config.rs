//! Run configuration: one TOML document covering the agent, auxiliary
//! losses, PPO, simulator, world generation and the training budget.
//!
//! Every table rejects unknown keys. Omitted keys take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::WorldConfig;
use crate::error::{Error, Result};
use crate::policy::AgentConfig;
use crate::ppo::{AuxConfig, PpoConfig};
use crate::simulator::SimConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub seed: u64,
    /// Stop after this many environment steps (rounded up to whole updates).
    pub total_env_steps: u64,
    /// Write a checkpoint every this many updates (0 = only at the end).
    pub checkpoint_every: u64,
    /// Number of finished episodes the running episode metrics average over.
    pub stats_window: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { seed: 0, total_env_steps: 1_000_000, checkpoint_every: 50, stats_window: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub output_dir: PathBuf,
    pub agent: AgentConfig,
    pub aux: AuxConfig,
    pub ppo: PpoConfig,
    pub sim: SimConfig,
    pub world: WorldConfig,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            output_dir: PathBuf::from("runs/default"),
            agent: AgentConfig::default(),
            aux: AuxConfig::default(),
            ppo: PpoConfig::default(),
            sim: SimConfig::default(),
            world: WorldConfig::default(),
            train: TrainSettings::default(),
        }
    }
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl RunConfig {
    /// Parses and validates a TOML document. Errors carry the line of the
    /// offending key when one is known.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version)));
        }
        self.agent.validate()?;
        self.aux.validate()?;
        self.ppo.validate()?;
        self.sim.validate()?;
        self.world.validate()?;
        // TOML integers are signed 64-bit; larger values could not be saved with the run.
        let limit = i64::MAX as u64;
        for (name, v) in [("train.seed", self.train.seed), ("train.total_env_steps", self.train.total_env_steps), ("train.checkpoint_every", self.train.checkpoint_every)] {
            if v > limit {
                return Err(Error::Config(format!("{name} must be at most {limit}, got {v}")));
            }
        }
        if self.train.stats_window == 0 {
            return Err(Error::Config("train.stats_window must be positive".into()));
        }
        Ok(())
    }

    /// Environment steps gathered by one update.
    pub fn steps_per_update(&self) -> u64 {
        (self.ppo.num_envs * self.ppo.rollout_len) as u64
    }

    pub fn total_updates(&self) -> u64 {
        self.train.total_env_steps.div_ceil(self.steps_per_update())
    }
}
