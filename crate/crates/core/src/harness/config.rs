//! The single JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::PidGains;
use crate::env::{EnvConfig, SemanticsConfig, SimConfig};
use crate::error::{Error, Result};
use crate::fusion::BranchMask;
use crate::perception::PerceptionConfig;
use crate::ppo::{NetConfig, PpoConfig};
use crate::reward::RewardParams;
use crate::sim::TrackProfile;

/// Layer widths and precision; input sizes come from the other sections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub conv1: usize,
    pub conv2: usize,
    pub image_dense: usize,
    pub lidar_dense: usize,
    pub semantic_dense: usize,
    pub pid_dense: usize,
    pub fusion: usize,
    pub log_std_init: f64,
    pub precision: crate::ppo::Precision,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let n = NetConfig::default();
        Self {
            conv1: n.conv1,
            conv2: n.conv2,
            image_dense: n.image_dense,
            lidar_dense: n.lidar_dense,
            semantic_dense: n.semantic_dense,
            pid_dense: n.pid_dense,
            fusion: n.fusion,
            log_std_init: n.log_std_init,
            precision: n.precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_trials: usize,
    /// Trial `i` uses seed `seed_base + i` for both track and spawn.
    pub seed_base: u64,
    pub profile: TrackProfile,
    /// Episodes of the uniform random policy used as the return baseline.
    pub random_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_trials: 100, seed_base: 50_000, profile: TrackProfile::Mixed, random_episodes: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub sim: SimConfig,
    pub perception: PerceptionConfig,
    pub semantics: SemanticsConfig,
    pub pid: PidGains,
    pub reward: RewardParams,
    pub ppo: PpoConfig,
    pub network: NetworkSection,
    pub mask: BranchMask,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            sim: SimConfig::default(),
            perception: PerceptionConfig::default(),
            semantics: SemanticsConfig::default(),
            pid: PidGains::default(),
            reward: RewardParams::default(),
            ppo: PpoConfig::default(),
            network: NetworkSection::default(),
            mask: BranchMask::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.env_config().validate()?;
        self.ppo_config().validate()?;
        self.net_config().validate()?;
        if self.eval.n_trials == 0 {
            return Err(Error::Config("eval.n_trials must be positive".into()));
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            sim: self.sim.clone(),
            perception: self.perception.clone(),
            semantics: self.semantics.clone(),
            pid: self.pid.clone(),
            reward: self.reward.clone(),
            mask: self.mask,
        }
    }

    /// The top-level seed drives training.
    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig { seed: self.seed, ..self.ppo.clone() }
    }

    pub fn net_config(&self) -> NetConfig {
        let n = &self.network;
        NetConfig {
            height: self.perception.height,
            width: self.perception.width,
            rays: self.sim.lidar.rays,
            semantic_dim: self.semantics.encoder.d,
            conv1: n.conv1,
            conv2: n.conv2,
            image_dense: n.image_dense,
            lidar_dense: n.lidar_dense,
            semantic_dense: n.semantic_dense,
            pid_dense: n.pid_dense,
            fusion: n.fusion,
            log_std_init: n.log_std_init,
            precision: n.precision,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"ppo": {"lr": 1}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"extra": 1}"#), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(RunConfig::from_json(r#"{"ppo": {"gamma": 1.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"eval": {"n_trials": 0}}"#).is_err());
    }

    #[test]
    fn seed_flows_into_training() {
        let c = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(c.ppo_config().seed, 7);
        assert_eq!(c.net_config().rays, 180);
    }
}
