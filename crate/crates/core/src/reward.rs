//! Hybrid lane-keeping reward: lane, LiDAR, speed and centering terms,
//! weighted, clipped, with termination penalties.
//!
//! Lateral offsets are in image pixels (`PX_TO_M` metres each), LiDAR
//! distances in metres and speeds in km/h.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metres per pixel of the lateral-offset image scale (5 m lane = 235 px).
pub const PX_TO_M: f64 = 5.0 / 235.0;

pub fn m_to_px(m: f64) -> f64 {
    m / PX_TO_M
}

pub fn px_to_m(px: f64) -> f64 {
    px * PX_TO_M
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub w_lane: f64,
    pub w_lidar: f64,
    pub w_speed: f64,
    pub w_center: f64,
    /// Pixels.
    pub d_lane: f64,
    pub d_clip: f64,
    pub d_reset: f64,
    pub k: f64,
    /// km/h.
    pub v_target: f64,
    /// Metres.
    pub d_mid: f64,
    pub d_low: f64,
    pub d_crit: f64,
    pub d_fail: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub r_bonus: f64,
    /// Closed intervals of `d_min` that earn the bonus.
    pub bonus_ranges: Vec<(f64, f64)>,
    pub r_clip: f64,
    pub r_fail: f64,
    /// Normalizer of the proximity penalty; `None` means `d_mid - d_low`.
    pub d_range: Option<f64>,
    /// Consecutive steps below `d_fail` before the episode terminates.
    pub n_viol: u32,
    /// Episode step limit; reaching it truncates without penalty.
    pub max_steps: u64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            w_lane: 0.3,
            w_lidar: 0.3,
            w_speed: 0.2,
            w_center: 0.2,
            d_lane: 100.0,
            d_clip: 80.0,
            d_reset: 85.0,
            k: 2.5,
            v_target: 20.0,
            d_mid: 8.0,
            d_low: 4.0,
            d_crit: 2.8,
            d_fail: 2.0,
            b1: 5.0,
            b2: 10.0,
            b3: 2.0,
            r_bonus: 5.0,
            bonus_ranges: vec![(3.0, 4.0), (8.0, 10.0)],
            r_clip: 1.0,
            r_fail: 3.0,
            d_range: None,
            n_viol: 1,
            max_steps: 1000,
        }
    }
}

impl RewardParams {
    pub fn d_range(&self) -> f64 {
        self.d_range.unwrap_or(self.d_mid - self.d_low)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_lane, self.w_lidar, self.w_speed, self.w_center];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("reward weights must be finite and non-negative".into()));
        }
        if !(self.d_reset <= self.d_lane) {
            return Err(Error::Config("reward.d_reset must not exceed reward.d_lane".into()));
        }
        if !(self.d_crit < self.d_low && self.d_low < self.d_mid) {
            return Err(Error::Config("reward distances must satisfy d_crit < d_low < d_mid".into()));
        }
        if !(self.r_clip > 0.0) || !(self.d_range() > 0.0) || !(self.v_target > 0.0) {
            return Err(Error::Config("reward.r_clip, d_range and v_target must be positive".into()));
        }
        if !(self.d_lane > 0.0 && self.d_clip > 0.0) || self.n_viol == 0 || self.max_steps == 0 {
            return Err(Error::Config("reward.d_lane, d_clip, n_viol and max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationCause {
    None,
    OffRoad,
    Obstacle,
    MaxSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_lane: f64,
    pub r_lidar: f64,
    pub r_speed: f64,
    pub r_center: f64,
    pub shaped: f64,
    /// Final reward handed to the learner.
    pub reward: f64,
    pub terminated: bool,
    pub cause: TerminationCause,
}

pub fn r_lane(dx_px: f64, p: &RewardParams) -> f64 {
    1.0 - dx_px.abs() / p.d_lane
}

/// Piecewise proximity term; cases are tried in order and the first match wins.
pub fn r_lidar(d_min: f64, p: &RewardParams) -> f64 {
    if d_min >= p.d_low && d_min <= p.d_mid {
        -p.b1 * (p.d_mid - d_min) / p.d_range()
    } else if d_min < p.d_crit {
        -p.b2 + p.b3 * d_min
    } else if p.bonus_ranges.iter().any(|&(lo, hi)| d_min >= lo && d_min <= hi) {
        p.r_bonus
    } else {
        0.0
    }
}

pub fn r_speed(v_kmh: f64, p: &RewardParams) -> f64 {
    let rel = (v_kmh - p.v_target) / p.v_target;
    -(rel * rel)
}

pub fn r_center(dx_px: f64, p: &RewardParams) -> f64 {
    let ratio = dx_px.abs() / p.d_clip;
    -p.k * ratio * ratio
}

/// Reward for one step, counting a single proximity violation when
/// `d_min < d_fail`.
pub fn total_reward(dx_px: f64, d_min: f64, v_kmh: f64, step_count: u64, p: &RewardParams) -> RewardBreakdown {
    let streak = u32::from(d_min < p.d_fail);
    total_reward_with_streak(dx_px, d_min, v_kmh, step_count, streak, p)
}

/// Reward for one step given the number of consecutive steps (this one
/// included) with `d_min < d_fail`.
pub fn total_reward_with_streak(
    dx_px: f64,
    d_min: f64,
    v_kmh: f64,
    step_count: u64,
    violation_streak: u32,
    p: &RewardParams,
) -> RewardBreakdown {
    let r_lane = r_lane(dx_px, p);
    let r_lidar = r_lidar(d_min, p);
    let r_speed = r_speed(v_kmh, p);
    let r_center = r_center(dx_px, p);
    let shaped = p.w_lane * r_lane + p.w_lidar * r_lidar + p.w_speed * r_speed + p.w_center * r_center;

    let fail_cause = if dx_px.abs() > p.d_reset {
        Some(TerminationCause::OffRoad)
    } else if d_min < p.d_fail && violation_streak >= p.n_viol {
        Some(TerminationCause::Obstacle)
    } else {
        None
    };
    let (reward, terminated, cause) = match fail_cause {
        // The failure penalty is not subject to the clip.
        Some(cause) => (-p.r_fail, true, cause),
        None => {
            let r = shaped.clamp(-p.r_clip, p.r_clip);
            if step_count >= p.max_steps {
                (r, true, TerminationCause::MaxSteps)
            } else {
                (r, false, TerminationCause::None)
            }
        }
    };
    RewardBreakdown { r_lane, r_lidar, r_speed, r_center, shaped, reward, terminated, cause }
}
