//! Deterministic 2D lane-keeping world.

pub mod lidar;
pub mod scene;
pub mod track;
pub mod vehicle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;

pub use lidar::{cast_lidar, LidarConfig, LidarScan};
pub use scene::{describe_scene, CurvatureClass, CurveDirection, DistanceClass, SceneDescriptor, SceneThresholds};
pub use track::{generate_track, generate_track_with, Obstacle, Segment, TrackConfig, TrackPoolDoc, TrackProfile, TrackSpec};
pub use vehicle::{step_dynamics, VehicleParams, VehicleState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpawnConfig {
    /// Arc length at which episodes start.
    pub start_s: f64,
    /// Lateral jitter is uniform in `[-jitter, jitter]` metres.
    pub jitter: f64,
    pub initial_speed: f64,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self { start_s: 5.0, jitter: 0.5, initial_speed: 0.0 }
    }
}

/// Picks the track for `episode_index` cyclically from the pool and returns
/// a freshly reset vehicle on it.
pub fn reset_episode(
    pool: &[TrackSpec],
    episode_index: u64,
    seed: u64,
    spawn: &SpawnConfig,
) -> Result<(VehicleState, TrackSpec)> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let track = pool[(episode_index % pool.len() as u64) as usize].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode_index);
    let jitter = if spawn.jitter > 0.0 {
        rng.random_range(-spawn.jitter..=spawn.jitter)
    } else {
        0.0
    };
    let s = spawn.start_s.min(track.length());
    let heading = track.heading_at(s);
    let position = track.point_at(s) + Vec2::from_angle(heading).right() * jitter;
    let state = VehicleState::on_track(&track, position, heading, spawn.initial_speed);
    Ok((state, track))
}
