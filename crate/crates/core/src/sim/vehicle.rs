//! Kinematic bicycle plant with a first-order speed lag.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::geom::{wrap_angle, Vec2};
use crate::sim::track::TrackSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub max_steering_angle: f64,
    /// Time constant of the speed response (s).
    pub speed_tau: f64,
    pub dt: f64,
    /// Maximum cruising speed (m/s); an action of `a2 = +1` maps here.
    pub v_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            max_steering_angle: 0.5,
            speed_tau: 0.5,
            dt: 0.05,
            v_max: 40.0 / 3.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    /// Signed distance to the centerline, positive to the right.
    pub lateral_offset: f64,
    pub heading_error: f64,
    /// Arc length of the nearest centerline point.
    pub progress: f64,
    pub step_index: u64,
    pub elapsed: f64,
}

impl VehicleState {
    /// State at `position`/`heading` with track-relative fields filled in.
    pub fn on_track(track: &TrackSpec, position: Vec2, heading: f64, speed: f64) -> Self {
        let proj = track.project(position);
        Self {
            position,
            heading: wrap_angle(heading),
            speed,
            lateral_offset: proj.lateral,
            heading_error: wrap_angle(heading - proj.heading),
            progress: proj.s,
            step_index: 0,
            elapsed: 0.0,
        }
    }

    /// The state reflected across the world x axis, matching [`TrackSpec::mirrored`].
    pub fn mirrored(&self) -> Self {
        Self {
            position: self.position.mirror_y(),
            heading: wrap_angle(-self.heading),
            lateral_offset: -self.lateral_offset,
            heading_error: wrap_angle(-self.heading_error),
            ..*self
        }
    }
}

/// Advances the vehicle by one step of `dt` seconds.
///
/// Positive steering turns right (clockwise). Position is integrated with the
/// speed at the start of the step; the speed then relaxes toward
/// `target_speed` with the exact solution of the first-order lag.
pub fn step_dynamics(
    state: &VehicleState,
    track: &TrackSpec,
    steering: f64,
    target_speed: f64,
    dt: f64,
    params: &VehicleParams,
) -> Result<VehicleState> {
    ensure_finite(steering, "steering")?;
    ensure_finite(target_speed, "target speed")?;
    ensure_finite(dt, "dt")?;
    if dt <= 0.0 {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if steering.abs() > params.max_steering_angle + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "steering {steering} exceeds limit {}",
            params.max_steering_angle
        )));
    }
    let target_speed = target_speed.max(0.0);

    let v = state.speed;
    let dir = Vec2::from_angle(state.heading);
    let position = state.position + dir * (v * dt);
    let heading = wrap_angle(state.heading - v / params.wheelbase * steering.tan() * dt);
    let lag = (-dt / params.speed_tau).exp();
    let speed = (target_speed + (v - target_speed) * lag).max(0.0);

    let travel = v * dt;
    let proj = track.project_local(
        position,
        state.progress - 10.0 - travel,
        state.progress + 10.0 + travel,
    );
    Ok(VehicleState {
        position,
        heading,
        speed,
        lateral_offset: proj.lateral,
        heading_error: wrap_angle(heading - proj.heading),
        progress: proj.s,
        step_index: state.step_index + 1,
        elapsed: state.elapsed + dt,
    })
}
