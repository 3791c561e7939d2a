//! The lane-keeping environment: simulator, perception, PID feature,
//! semantic tokens and reward behind a reset/step interface.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{map_action, pid_reset, pid_step, PidGains, PidState};
use crate::error::{Error, Result};
use crate::fusion::{assemble_observation, BranchMask, Observation, SemanticNormalizer};
use crate::perception::{hough_lane_offset, render_raster, LaneEstimate, LaneRaster, OffsetMode, OffsetTracker, PerceptionConfig};
use crate::reward::{m_to_px, px_to_m, total_reward_with_streak, RewardBreakdown, RewardParams, TerminationCause};
use crate::semantics::{caption_from_scene, encode_semantics, EncoderConfig, EncoderWeights, TokenCache, Vocab};
use crate::sim::{
    cast_lidar, describe_scene, generate_track_with, reset_episode, step_dynamics, LidarConfig, LidarScan, SceneDescriptor,
    SceneThresholds, SpawnConfig, TrackConfig, TrackProfile, TrackSpec, VehicleParams, VehicleState,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub vehicle: VehicleParams,
    pub lidar: LidarConfig,
    pub spawn: SpawnConfig,
    pub scene: SceneThresholds,
    pub track: TrackConfig,
    pub profile: TrackProfile,
    /// Number of generated tracks in the training pool.
    pub pool_size: usize,
    pub pool_seed: u64,
    /// Episodes are truncated this far (m) before the end of the track.
    pub end_margin: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            vehicle: VehicleParams::default(),
            lidar: LidarConfig::default(),
            spawn: SpawnConfig::default(),
            scene: SceneThresholds::default(),
            track: TrackConfig::default(),
            profile: TrackProfile::Mixed,
            pool_size: 8,
            pool_seed: 1000,
            end_margin: 40.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let v = &self.vehicle;
        if !(v.wheelbase > 0.0 && v.max_steering_angle > 0.0 && v.speed_tau > 0.0 && v.dt > 0.0 && v.v_max > 0.0) {
            return Err(Error::Config("sim.vehicle parameters must be positive".into()));
        }
        if self.lidar.rays == 0 || !(self.lidar.max_range > 0.0) {
            return Err(Error::Config("sim.lidar needs at least one ray and a positive range".into()));
        }
        if self.pool_size == 0 {
            return Err(Error::Config("sim.pool_size must be positive".into()));
        }
        if !(self.spawn.jitter >= 0.0) || !(self.end_margin >= 0.0) {
            return Err(Error::Config("sim.spawn.jitter and sim.end_margin must be non-negative".into()));
        }
        Ok(())
    }

    pub fn generate_pool(&self) -> Vec<TrackSpec> {
        (0..self.pool_size as u64)
            .map(|i| generate_track_with(self.pool_seed + i, self.profile, &self.track))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticsConfig {
    pub encoder: EncoderConfig,
    /// Tokens are regenerated every `cache_k` steps.
    pub cache_k: u64,
    /// Steps of running statistics before the standardizer freezes.
    pub warmup: u64,
    /// Mirrored transitions get tokens from the mirrored scene instead of copies.
    pub regenerate_tokens: bool,
}

impl Default for SemanticsConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), cache_k: 10, warmup: 1000, regenerate_tokens: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub sim: SimConfig,
    pub perception: PerceptionConfig,
    pub semantics: SemanticsConfig,
    pub pid: PidGains,
    pub reward: RewardParams,
    pub mask: BranchMask,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.perception.validate()?;
        self.semantics.encoder.validate()?;
        if self.semantics.cache_k == 0 {
            return Err(Error::Config("semantics.cache_k must be at least 1".into()));
        }
        if self.perception.height % self.semantics.encoder.patch != 0 || self.perception.width % self.semantics.encoder.patch != 0 {
            return Err(Error::Config("raster size must be divisible by semantics.encoder.patch".into()));
        }
        self.pid.validate()?;
        self.reward.validate()
    }
}

/// Immutable parts shared by environment copies.
#[derive(Debug)]
pub struct EnvShared {
    pub cfg: EnvConfig,
    pub pool: Vec<TrackSpec>,
    pub vocab: Vocab,
    pub weights: EncoderWeights,
}

impl EnvShared {
    pub fn new(cfg: EnvConfig, pool: Vec<TrackSpec>) -> Result<Self> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        let vocab = Vocab::default();
        let weights = EncoderWeights::new(vocab.len(), &cfg.semantics.encoder)?;
        Ok(Self { cfg, pool, vocab, weights })
    }

    pub fn raw_embedding(&self, scene: &SceneDescriptor, raster: &LaneRaster) -> Result<Vec<f64>> {
        Ok(encode_semantics(&caption_from_scene(scene, &self.vocab), raster, &self.weights)?.e)
    }
}

/// Everything that changes while the environment runs; serializable for
/// exact resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub seed: u64,
    pub episode_index: u64,
    pub track_index: usize,
    pub vehicle: VehicleState,
    pub pid: PidState,
    pub tracker: OffsetTracker,
    pub cache: TokenCache,
    pub normalizer: SemanticNormalizer,
    pub violation_streak: u32,
    pub total_steps: u64,
    pub obs: Option<Arc<Observation>>,
    pub scene: Option<SceneDescriptor>,
    pub needs_reset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Ground-truth lateral offset (m, + right).
    pub dx_m: f64,
    /// Offset fed to reward and PID, reward-scale px.
    pub dx_px: f64,
    pub speed: f64,
    pub d_min: f64,
    pub confidence: f64,
    pub breakdown: RewardBreakdown,
    pub scene: SceneDescriptor,
    pub track_index: usize,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Arc<Observation>,
    pub reward: f64,
    /// Failure termination.
    pub terminated: bool,
    /// Step limit or end of track.
    pub truncated: bool,
    pub info: StepInfo,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

struct Sensed {
    obs: Arc<Observation>,
    scene: SceneDescriptor,
    scan: LidarScan,
    dx_px: f64,
    confidence: f64,
}

#[derive(Debug, Clone)]
pub struct LaneEnv {
    pub shared: Arc<EnvShared>,
    pub state: EnvState,
}

impl LaneEnv {
    pub fn new(shared: Arc<EnvShared>, seed: u64) -> Self {
        let cfg = &shared.cfg;
        let (vehicle, _) = reset_episode(&shared.pool, 0, seed, &cfg.sim.spawn).expect("pool is non-empty");
        let state = EnvState {
            seed,
            episode_index: 0,
            track_index: 0,
            vehicle,
            pid: pid_reset(&cfg.pid),
            tracker: OffsetTracker::new(seed ^ 0x6e6f_6973_6521),
            cache: TokenCache::new(cfg.semantics.cache_k),
            normalizer: SemanticNormalizer::new(cfg.semantics.encoder.d, cfg.semantics.warmup),
            violation_streak: 0,
            total_steps: 0,
            obs: None,
            scene: None,
            needs_reset: true,
        };
        Self { shared, state }
    }

    pub fn from_config(cfg: EnvConfig, seed: u64) -> Result<Self> {
        let pool = cfg.sim.generate_pool();
        Ok(Self::new(Arc::new(EnvShared::new(cfg, pool)?), seed))
    }

    pub fn cfg(&self) -> &EnvConfig {
        &self.shared.cfg
    }

    pub fn track(&self) -> &TrackSpec {
        &self.shared.pool[self.state.track_index]
    }

    pub fn observation(&self) -> Option<&Arc<Observation>> {
        self.state.obs.as_ref()
    }

    /// Standardized embedding for a scene/raster pair under the current statistics.
    pub fn semantic_for(&self, scene: &SceneDescriptor, raster: &LaneRaster) -> Result<Vec<f64>> {
        Ok(self.state.normalizer.apply(&self.shared.raw_embedding(scene, raster)?))
    }

    /// Starts the next episode on the next track of the pool.
    pub fn reset(&mut self) -> Result<Arc<Observation>> {
        let shared = Arc::clone(&self.shared);
        let cfg = &shared.cfg;
        let idx = self.state.episode_index;
        let (vehicle, _) = reset_episode(&shared.pool, idx, self.state.seed, &cfg.sim.spawn)?;
        self.state.track_index = (idx % shared.pool.len() as u64) as usize;
        self.state.episode_index += 1;
        self.state.vehicle = vehicle;
        self.state.pid = pid_reset(&cfg.pid);
        self.state.tracker.reset();
        self.state.cache.clear();
        self.state.violation_streak = 0;
        self.state.needs_reset = false;
        let sensed = self.sense()?;
        self.state.obs = Some(Arc::clone(&sensed.obs));
        self.state.scene = Some(sensed.scene);
        Ok(sensed.obs)
    }

    fn sense(&mut self) -> Result<Sensed> {
        let shared = Arc::clone(&self.shared);
        let cfg = &shared.cfg;
        let track = &shared.pool[self.state.track_index];
        let v = &self.state.vehicle;
        let raster = render_raster(v, track, &cfg.perception);
        let estimate = match cfg.perception.mode {
            OffsetMode::Hough => hough_lane_offset(&raster, &cfg.perception),
            _ => LaneEstimate::none(),
        };
        let dx_px = self.state.tracker.offset_for_control(
            &estimate,
            m_to_px(v.lateral_offset),
            cfg.perception.mode,
            raster.px_per_m,
            cfg.perception.noise_sigma_px,
        );
        let (pid, u) = pid_step(&self.state.pid, -px_to_m(dx_px), &cfg.pid)?;
        self.state.pid = pid;

        let scan = cast_lidar(v, track, &cfg.sim.lidar);
        let scene = describe_scene(v, track, &scan, &cfg.sim.scene);
        let semantic = if cfg.mask.semantic {
            let raw = self.state.cache.get(v.step_index, || {
                Ok(crate::semantics::SemanticEmbedding { e: shared.raw_embedding(&scene, &raster)? })
            })?;
            self.state.normalizer.observe(&raw.e)?;
            self.state.normalizer.apply(&raw.e)
        } else {
            vec![0.0; cfg.semantics.encoder.d]
        };
        let obs = assemble_observation(raster, &scan, u, cfg.pid.u_max, semantic, cfg.mask)?;
        Ok(Sensed { obs: Arc::new(obs), scene, scan, dx_px, confidence: estimate.confidence })
    }

    /// Applies a normalized action. Components outside `[-1, 1]` are clipped.
    pub fn step(&mut self, a1: f64, a2: f64) -> Result<StepResult> {
        if self.state.needs_reset {
            return Err(Error::InvalidArgument("step called on a finished episode; call reset first".into()));
        }
        let shared = Arc::clone(&self.shared);
        let cfg = &shared.cfg;
        let vp = &cfg.sim.vehicle;
        let cmd = map_action(a1, a2, vp.max_steering_angle, vp.v_max);
        let track = &shared.pool[self.state.track_index];
        self.state.vehicle = step_dynamics(&self.state.vehicle, track, cmd.steering_cmd, cmd.target_speed_cmd, vp.dt, vp)?;
        self.state.total_steps += 1;
        let sensed = self.sense()?;

        let v = &self.state.vehicle;
        let p = &cfg.reward;
        self.state.violation_streak = if sensed.scan.d_min < p.d_fail { self.state.violation_streak + 1 } else { 0 };
        let mut b = total_reward_with_streak(sensed.dx_px, sensed.scan.d_min, v.speed * 3.6, v.step_index, self.state.violation_streak, p);
        // The perceived offset can hold a stale value; leaving the road by
        // ground truth always ends the episode.
        let fail = matches!(b.cause, TerminationCause::OffRoad | TerminationCause::Obstacle);
        if !fail && m_to_px(v.lateral_offset).abs() > p.d_reset {
            b.reward = -p.r_fail;
            b.terminated = true;
            b.cause = TerminationCause::OffRoad;
        }
        if !b.terminated && v.progress >= track.length() - cfg.sim.end_margin {
            b.terminated = true;
            b.cause = TerminationCause::MaxSteps;
        }
        let terminated = matches!(b.cause, TerminationCause::OffRoad | TerminationCause::Obstacle);
        let truncated = b.cause == TerminationCause::MaxSteps;
        self.state.needs_reset = terminated || truncated;
        self.state.obs = Some(Arc::clone(&sensed.obs));
        self.state.scene = Some(sensed.scene);
        Ok(StepResult {
            obs: sensed.obs,
            reward: b.reward,
            terminated,
            truncated,
            info: StepInfo {
                dx_m: v.lateral_offset,
                dx_px: sensed.dx_px,
                speed: v.speed,
                d_min: sensed.scan.d_min,
                confidence: sensed.confidence,
                breakdown: b,
                scene: sensed.scene,
                track_index: self.state.track_index,
            },
        })
    }
}

/// Classical baseline: steer with the PID feature, hold the target speed.
pub fn pid_driver_action(obs: &Observation) -> [f64; 2] {
    [obs.pid_norm, 0.0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_with(mode: OffsetMode) -> EnvConfig {
        let mut c = EnvConfig::default();
        c.perception.mode = mode;
        c.sim.pool_size = 2;
        c
    }

    #[test]
    fn step_before_reset_is_rejected() {
        let mut env = LaneEnv::from_config(cfg_with(OffsetMode::GroundTruth), 1).unwrap();
        assert!(env.step(0.0, 0.0).is_err());
        env.reset().unwrap();
        env.step(0.0, 0.0).unwrap();
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = || {
            let mut env = LaneEnv::from_config(cfg_with(OffsetMode::Hough), 5).unwrap();
            let mut obs = env.reset().unwrap();
            let mut out = Vec::new();
            for i in 0..150 {
                let a = pid_driver_action(&obs);
                let r = env.step(a[0], (i % 7) as f64 / 10.0 - 0.3).unwrap();
                out.push((r.reward, r.info.dx_m, r.obs.pid_norm, r.obs.semantic.clone()));
                obs = if r.done() { env.reset().unwrap() } else { r.obs };
            }
            (out, env.state.clone())
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn observations_stay_in_range() {
        let mut env = LaneEnv::from_config(cfg_with(OffsetMode::Hough), 2).unwrap();
        let mut obs = env.reset().unwrap();
        for i in 0..600 {
            assert!(obs.is_valid());
            let a1 = ((i * 37) % 11) as f64 / 5.0 - 1.0;
            let r = env.step(a1, 0.2).unwrap();
            obs = if r.done() { env.reset().unwrap() } else { r.obs };
        }
    }

    #[test]
    fn pid_driver_keeps_lane_on_mixed_tracks() {
        let mut env = LaneEnv::from_config(cfg_with(OffsetMode::Hough), 3).unwrap();
        let mut obs = env.reset().unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..600 {
            let a = pid_driver_action(&obs);
            let r = env.step(a[0], a[1]).unwrap();
            assert!(!r.terminated, "PID driver left the road: {:?}", r.info);
            worst = worst.max(r.info.dx_m.abs());
            if r.done() {
                break;
            }
            obs = r.obs;
        }
        assert!(worst < 1.0, "max |dx| {worst}");
    }

    #[test]
    fn leaving_the_road_terminates_with_penalty() {
        let mut env = LaneEnv::from_config(cfg_with(OffsetMode::GroundTruth), 4).unwrap();
        env.reset().unwrap();
        let mut last = None;
        for _ in 0..400 {
            let r = env.step(1.0, 0.5).unwrap();
            if r.done() {
                last = Some(r);
                break;
            }
        }
        let r = last.expect("hard right steering must end the episode");
        assert!(r.terminated);
        assert_eq!(r.reward, -3.0);
        assert_eq!(r.info.breakdown.cause, TerminationCause::OffRoad);
        assert!(env.step(0.0, 0.0).is_err());
    }

    #[test]
    fn masked_branches_are_zero() {
        let mut c = cfg_with(OffsetMode::GroundTruth);
        c.mask = BranchMask { semantic: false, pid: false };
        let mut env = LaneEnv::from_config(c, 1).unwrap();
        let mut obs = env.reset().unwrap();
        for _ in 0..50 {
            assert_eq!(obs.pid_norm, 0.0);
            assert!(obs.semantic.iter().all(|&v| v == 0.0));
            obs = env.step(0.1, 0.0).unwrap().obs;
        }
    }

    #[test]
    fn state_round_trips_through_json() {
        let mut env = LaneEnv::from_config(cfg_with(OffsetMode::GroundTruthNoisy), 8).unwrap();
        env.reset().unwrap();
        for _ in 0..30 {
            env.step(0.05, 0.1).unwrap();
        }
        let text = serde_json::to_string(&env.state).unwrap();
        let mut copy = env.clone();
        copy.state = serde_json::from_str(&text).unwrap();
        assert_eq!(copy.state, env.state);
        for _ in 0..30 {
            let a = env.step(-0.05, 0.1).unwrap();
            let b = copy.step(-0.05, 0.1).unwrap();
            assert_eq!(a.reward.to_bits(), b.reward.to_bits());
            assert_eq!(a.obs, b.obs);
        }
    }
}
