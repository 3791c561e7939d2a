//! Rollout collection, augmentation and the outer training loop, plus
//! versioned JSON checkpoints.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvState, LaneEnv};
use crate::error::{Error, Result};
use crate::fusion::{augment_plan, mirror_transition, Observation, TokenRegenerator, Transition};
use crate::perception::LaneRaster;
use crate::sim::SceneDescriptor;

use super::gae::{compute_gae, normalize};
use super::network::{FusionNet, NetConfig};
use super::policy::{clip_action, log_prob, sample_action};
use super::update::{update, Adam, PpoConfig, Sample, UpdateMetrics};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct EnvStep {
    pub obs: Arc<Observation>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    /// Ground-truth lateral offset, m.
    pub dx_m: f64,
    pub speed: f64,
    pub scene: Option<SceneDescriptor>,
}

/// What the trainer needs from an environment.
pub trait Environment {
    fn reset(&mut self) -> Result<Arc<Observation>>;
    fn step(&mut self, action: [f64; 2]) -> Result<EnvStep>;
    /// Observation of the episode in flight, if any.
    fn current_observation(&self) -> Option<Arc<Observation>> {
        None
    }
    fn scene(&self) -> Option<SceneDescriptor> {
        None
    }
    /// Whether mirrored observations get freshly computed semantic vectors.
    fn regenerates_tokens(&self) -> bool {
        false
    }
    fn regenerate_tokens(&self, _scene: &SceneDescriptor, _raster: &LaneRaster) -> Result<Vec<f64>> {
        Err(Error::InvalidArgument("token regeneration unavailable".into()))
    }
    fn save_state(&self) -> Result<serde_json::Value>;
    fn load_state(&mut self, state: serde_json::Value) -> Result<()>;
}

impl Environment for LaneEnv {
    fn reset(&mut self) -> Result<Arc<Observation>> {
        LaneEnv::reset(self)
    }

    fn step(&mut self, action: [f64; 2]) -> Result<EnvStep> {
        let r = LaneEnv::step(self, action[0], action[1])?;
        Ok(EnvStep {
            obs: r.obs,
            reward: r.reward,
            terminated: r.terminated,
            truncated: r.truncated,
            dx_m: r.info.dx_m,
            speed: r.info.speed,
            scene: Some(r.info.scene),
        })
    }

    fn current_observation(&self) -> Option<Arc<Observation>> {
        if self.state.needs_reset {
            None
        } else {
            self.state.obs.clone()
        }
    }

    fn scene(&self) -> Option<SceneDescriptor> {
        self.state.scene
    }

    fn regenerates_tokens(&self) -> bool {
        self.cfg().semantics.regenerate_tokens
    }

    fn regenerate_tokens(&self, scene: &SceneDescriptor, raster: &LaneRaster) -> Result<Vec<f64>> {
        self.semantic_for(scene, raster)
    }

    fn save_state(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(&self.state)?)
    }

    fn load_state(&mut self, state: serde_json::Value) -> Result<()> {
        self.state = serde_json::from_value::<EnvState>(state)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub update: u64,
    pub steps: u64,
    pub mean_return: f64,
    pub mean_abs_dx_m: f64,
    pub mean_speed: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

pub const LOG_HEADER: &str = "update,steps,mean_return,mean_abs_dx_m,mean_speed,actor_loss,critic_loss";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.update, self.steps, self.mean_return, self.mean_abs_dx_m, self.mean_speed, self.actor_loss, self.critic_loss
        )
    }
}

pub fn write_log_csv<W: Write>(out: &mut W, rows: &[LogRow]) -> Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

/// Statistics of one collected rollout.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RolloutStats {
    pub completed_episodes: u64,
    pub mean_return: f64,
    pub mean_abs_dx_m: f64,
    pub mean_speed: f64,
    pub mean_abs_a1: f64,
}

/// Progress of the episode in flight, carried across rollouts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeProgress {
    pub ret: f64,
    pub len: u64,
}

pub struct Trainer<E: Environment> {
    pub env: E,
    pub net: FusionNet,
    pub adam: Adam,
    pub cfg: PpoConfig,
    pub rng: ChaCha8Rng,
    pub updates: u64,
    pub steps: u64,
    pub episode: EpisodeProgress,
    pub log: Vec<LogRow>,
    obs: Option<Arc<Observation>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    seed: u64,
    steps: u64,
    updates: u64,
    ppo: PpoConfig,
    net: NetConfig,
}

/// Everything needed to continue training bit-exactly.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    header: CheckpointHeader,
    /// Caller-defined configuration, stored verbatim.
    pub run_config: serde_json::Value,
    pub params: Vec<f64>,
    adam: Adam,
    rng: ChaCha8Rng,
    episode: EpisodeProgress,
    env_state: serde_json::Value,
    log: Vec<LogRow>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.header.version)));
        }
        Ok(ck)
    }

    pub fn net(&self) -> Result<FusionNet> {
        FusionNet::from_params(self.header.net, self.params.clone())
    }

    pub fn net_config(&self) -> NetConfig {
        self.header.net
    }

    pub fn ppo_config(&self) -> &PpoConfig {
        &self.header.ppo
    }

    pub fn steps(&self) -> u64 {
        self.header.steps
    }

    pub fn updates(&self) -> u64 {
        self.header.updates
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    /// Serialized environment state at the time of the checkpoint.
    pub fn env_state(&self) -> &serde_json::Value {
        &self.env_state
    }
}

impl<E: Environment> Trainer<E> {
    pub fn new(env: E, net_cfg: NetConfig, cfg: PpoConfig) -> Result<Self> {
        cfg.validate()?;
        let net = FusionNet::new(net_cfg, cfg.seed)?;
        let adam = Adam::new(net.num_params(), cfg.learning_rate, cfg.adam_eps);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7070_6f5f_7472_6169);
        Ok(Self { env, net, adam, cfg, rng, updates: 0, steps: 0, episode: EpisodeProgress::default(), log: Vec::new(), obs: None })
    }

    /// Restores a trainer from a checkpoint; `env` must be built from the
    /// same configuration.
    pub fn from_checkpoint(mut env: E, ck: Checkpoint) -> Result<Self> {
        let net = ck.net()?;
        if ck.adam.m.len() != net.num_params() || ck.adam.v.len() != net.num_params() {
            return Err(Error::Checkpoint("optimizer state does not match the network".into()));
        }
        ck.header.ppo.validate()?;
        env.load_state(ck.env_state)?;
        Ok(Self {
            env,
            net,
            adam: ck.adam,
            cfg: ck.header.ppo,
            rng: ck.rng,
            updates: ck.header.updates,
            steps: ck.header.steps,
            episode: ck.episode,
            log: ck.log,
            obs: None,
        })
    }

    pub fn checkpoint(&self, run_config: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                seed: self.cfg.seed,
                steps: self.steps,
                updates: self.updates,
                ppo: self.cfg.clone(),
                net: self.net.config,
            },
            run_config,
            params: self.net.params.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            episode: self.episode,
            env_state: self.env.save_state()?,
            log: self.log.clone(),
        })
    }

    pub fn write_checkpoint(&self, path: &Path, run_config: serde_json::Value) -> Result<()> {
        let text = serde_json::to_string(&self.checkpoint(run_config)?)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    fn current_obs(&mut self) -> Result<Arc<Observation>> {
        if let Some(o) = &self.obs {
            return Ok(Arc::clone(o));
        }
        // After a restore the environment holds the observation in flight.
        let o = match self.env.current_observation() {
            Some(o) => o,
            None => self.env.reset()?,
        };
        self.obs = Some(Arc::clone(&o));
        Ok(o)
    }

    /// Collects `rollout_steps` transitions, crossing episode boundaries.
    pub fn collect_rollout(&mut self) -> Result<(Vec<Transition>, f64, RolloutStats)> {
        let n = self.cfg.rollout_steps;
        let mut buf = Vec::with_capacity(n);
        let mut stats = RolloutStats::default();
        let mut returns_sum = 0.0;
        let mut obs = self.current_obs()?;
        let policy = self.net.frozen();
        for _ in 0..n {
            let (mean, log_std, value) = policy.forward_one(&obs)?;
            let (raw, lp) = sample_action(mean, log_std, &mut self.rng);
            let exec = clip_action(raw);
            let scene_before = self.env.scene();
            let st = self.env.step(exec)?;
            self.steps += 1;
            self.episode.ret += st.reward;
            self.episode.len += 1;
            stats.mean_abs_dx_m += st.dx_m.abs();
            stats.mean_speed += st.speed;
            stats.mean_abs_a1 += exec[0].abs();
            let mut reward = st.reward;
            if st.truncated && !st.terminated {
                // Time-limit truncation: bootstrap from the cut-off state.
                reward += self.cfg.gamma * policy.forward_one(&st.obs)?.2;
            }
            let done = st.terminated || st.truncated;
            buf.push(Transition {
                obs: Arc::clone(&obs),
                action: raw,
                reward,
                next_obs: Arc::clone(&st.obs),
                done,
                log_prob: lp,
                value,
                scene: scene_before.zip(st.scene),
            });
            if done {
                stats.completed_episodes += 1;
                returns_sum += self.episode.ret;
                self.episode = EpisodeProgress::default();
                obs = self.env.reset()?;
            } else {
                obs = st.obs;
            }
        }
        let last_value = policy.forward_one(&obs)?.2;
        self.obs = Some(Arc::clone(&obs));
        let k = n as f64;
        stats.mean_abs_dx_m /= k;
        stats.mean_speed /= k;
        stats.mean_abs_a1 /= k;
        stats.mean_return = if stats.completed_episodes > 0 { returns_sum / stats.completed_episodes as f64 } else { self.episode.ret };
        Ok((buf, last_value, stats))
    }

    /// Advantages, augmentation and old log-probs for mirrored copies.
    pub fn build_samples(&self, buf: &[Transition], last_value: f64) -> Result<Vec<Sample>> {
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = buf.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = buf.iter().map(|t| t.done).collect();
        let (adv, ret) = compute_gae(&rewards, &values, &dones, last_value, self.cfg.gamma, self.cfg.lambda);
        let regen_fn = |s: &SceneDescriptor, r: &LaneRaster| self.env.regenerate_tokens(s, r);
        let regen: Option<TokenRegenerator> = if self.env.regenerates_tokens() { Some(&regen_fn) } else { None };

        let mut samples = Vec::with_capacity(buf.len() * 2);
        let mut mirrored_idx = Vec::new();
        for (i, m) in augment_plan(buf.len(), self.cfg.augment, self.cfg.t_aug)? {
            let t = &buf[i];
            if m {
                let mt = mirror_transition(t, regen)?;
                mirrored_idx.push(samples.len());
                samples.push(Sample { obs: mt.obs, action: mt.action, old_log_prob: f64::NAN, advantage: adv[i], ret: ret[i] });
            } else {
                samples.push(Sample { obs: Arc::clone(&t.obs), action: t.action, old_log_prob: t.log_prob, advantage: adv[i], ret: ret[i] });
            }
        }
        // Mirrored actions were never sampled; score them under the
        // pre-update policy.
        let policy = self.net.frozen();
        for chunk in mirrored_idx.chunks(64) {
            let obs: Vec<&Observation> = chunk.iter().map(|&j| samples[j].obs.as_ref()).collect();
            let out = policy.forward(&obs)?;
            for (k, &j) in chunk.iter().enumerate() {
                let mean = [out.mean[2 * k], out.mean[2 * k + 1]];
                samples[j].old_log_prob = log_prob(samples[j].action, mean, out.log_std);
            }
        }
        if self.cfg.normalize_advantages {
            let mut a: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
            normalize(&mut a);
            for (s, v) in samples.iter_mut().zip(a) {
                s.advantage = v;
            }
        }
        Ok(samples)
    }

    /// One rollout plus one update; appends and returns the log row.
    pub fn train_iteration(&mut self) -> Result<(LogRow, UpdateMetrics, RolloutStats)> {
        let (buf, last_value, stats) = self.collect_rollout()?;
        let samples = self.build_samples(&buf, last_value)?;
        drop(buf);
        let m = update(&mut self.net, &mut self.adam, &samples, &self.cfg, &mut self.rng)?;
        self.updates += 1;
        let row = LogRow {
            update: self.updates,
            steps: self.steps,
            mean_return: stats.mean_return,
            mean_abs_dx_m: stats.mean_abs_dx_m,
            mean_speed: stats.mean_speed,
            actor_loss: m.actor_loss,
            critic_loss: m.critic_loss,
        };
        self.log.push(row.clone());
        Ok((row, m, stats))
    }

    /// Runs until `num_updates` updates have been made in total. The
    /// callback sees the trainer after every update.
    pub fn train(&mut self, mut on_update: impl FnMut(&Self, &UpdateMetrics, &RolloutStats) -> Result<()>) -> Result<()> {
        while self.updates < self.cfg.num_updates() {
            let (_, m, s) = self.train_iteration()?;
            on_update(self, &m, &s)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::AugmentMode;

    /// Fixed observation, reward `-a1^2`, one-step episodes.
    struct Calibration {
        obs: Arc<Observation>,
    }

    impl Calibration {
        fn new(c: &NetConfig) -> Self {
            let mut raster = LaneRaster::blank(c.height, c.width, 6.0);
            for (i, p) in raster.pixels.iter_mut().enumerate() {
                *p = (i % 3) as f64 / 2.0;
            }
            Self { obs: Arc::new(Observation { raster, lidar_norm: vec![0.5; c.rays], pid_norm: 0.0, semantic: vec![0.0; c.semantic_dim] }) }
        }
    }

    impl Environment for Calibration {
        fn reset(&mut self) -> Result<Arc<Observation>> {
            Ok(Arc::clone(&self.obs))
        }
        fn step(&mut self, a: [f64; 2]) -> Result<EnvStep> {
            Ok(EnvStep { obs: Arc::clone(&self.obs), reward: -a[0] * a[0], terminated: true, truncated: false, dx_m: a[0], speed: 0.0, scene: None })
        }
        fn save_state(&self) -> Result<serde_json::Value> {
            Ok(serde_json::Value::Null)
        }
        fn load_state(&mut self, _: serde_json::Value) -> Result<()> {
            Ok(())
        }
    }

    fn tiny_cfg(total: u64) -> PpoConfig {
        PpoConfig { total_steps: total, augment: AugmentMode::Off, seed: 3, ..PpoConfig::default() }
    }

    #[test]
    fn update_count_and_log_rows() {
        let c = NetConfig::tiny();
        let mut t = Trainer::new(Calibration::new(&c), c, PpoConfig { epochs: 1, ..tiny_cfg(4096) }).unwrap();
        t.train(|_, _, _| Ok(())).unwrap();
        assert_eq!(t.updates, 2);
        assert_eq!(t.log.len(), 2);
        assert_eq!(t.steps, 4096);
    }

    #[test]
    fn calibration_task_drives_a1_to_zero() {
        let c = NetConfig::tiny();
        let mut t = Trainer::new(Calibration::new(&c), c, tiny_cfg(50 * 2048)).unwrap();
        let mut last = RolloutStats::default();
        t.train(|_, _, s| {
            last = *s;
            Ok(())
        })
        .unwrap();
        assert_eq!(t.updates, 50);
        assert!(last.mean_abs_a1 < 0.1, "mean |a1| {}", last.mean_abs_a1);
    }

    #[test]
    fn mirrored_samples_inherit_targets() {
        let c = NetConfig::tiny();
        let cfg = PpoConfig { rollout_steps: 64, augment: AugmentMode::EveryStep, normalize_advantages: false, ..tiny_cfg(64) };
        let mut t = Trainer::new(Calibration::new(&c), c, cfg).unwrap();
        let (buf, lv, _) = t.collect_rollout().unwrap();
        let s = t.build_samples(&buf, lv).unwrap();
        assert_eq!(s.len(), 128);
        for pair in s.chunks(2) {
            assert_eq!(pair[0].advantage, pair[1].advantage);
            assert_eq!(pair[0].ret, pair[1].ret);
            assert_eq!(pair[1].action, [-pair[0].action[0], pair[0].action[1]]);
            let (m, ls, _) = t.net.forward_one(&pair[1].obs).unwrap();
            assert_eq!(pair[1].old_log_prob, log_prob(pair[1].action, m, ls));
        }
        // Frozen log-probs of collected samples match a recomputation.
        for p in s.iter().step_by(2) {
            let (m, ls, _) = t.net.forward_one(&p.obs).unwrap();
            assert!((p.old_log_prob - log_prob(p.action, m, ls)).abs() < 1e-12);
        }
    }
}
