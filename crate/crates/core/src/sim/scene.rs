use serde::{Deserialize, Serialize};

use crate::sim::lidar::{ray_offsets, LidarScan};
use crate::sim::track::TrackSpec;
use crate::sim::vehicle::VehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureClass {
    Straight,
    GentleCurve,
    SharpCurve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveDirection {
    Left,
    Right,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceClass {
    Near,
    Mid,
    Far,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub curvature_class: CurvatureClass,
    pub curve_direction: CurveDirection,
    pub obstacle_ahead: bool,
    pub obstacle_distance_class: DistanceClass,
    pub lane_marking_visible: bool,
}

impl SceneDescriptor {
    /// Left and right swapped.
    pub fn mirrored(&self) -> Self {
        let curve_direction = match self.curve_direction {
            CurveDirection::Left => CurveDirection::Right,
            CurveDirection::Right => CurveDirection::Left,
            CurveDirection::None => CurveDirection::None,
        };
        Self { curve_direction, ..*self }
    }
}

/// Classification thresholds. Distance bands match the reward's LiDAR bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneThresholds {
    /// Arc length ahead of the vehicle inspected for curvature (m).
    pub lookahead: f64,
    /// Curvature (1/m) at or above which a curve counts as gentle.
    pub gentle_curvature: f64,
    /// Curvature (1/m) at or above which a curve counts as sharp.
    pub sharp_curvature: f64,
    pub near: f64,
    pub mid: f64,
    /// Half-width of the forward cone in which a LiDAR return counts as "ahead" (rad).
    pub ahead_half_angle: f64,
}

impl Default for SceneThresholds {
    fn default() -> Self {
        Self {
            lookahead: 25.0,
            gentle_curvature: 1.0 / 500.0,
            sharp_curvature: 1.0 / 40.0,
            near: 4.0,
            mid: 8.0,
            ahead_half_angle: 30f64.to_radians(),
        }
    }
}

pub fn describe_scene(
    state: &VehicleState,
    track: &TrackSpec,
    scan: &LidarScan,
    th: &SceneThresholds,
) -> SceneDescriptor {
    let mut kappa = 0.0f64;
    for p in track.pieces_in(state.progress, state.progress + th.lookahead) {
        if p.curvature.abs() > kappa.abs() {
            kappa = p.curvature;
        }
    }
    let (curvature_class, curve_direction) = if kappa.abs() < th.gentle_curvature {
        (CurvatureClass::Straight, CurveDirection::None)
    } else {
        let class = if kappa.abs() >= th.sharp_curvature {
            CurvatureClass::SharpCurve
        } else {
            CurvatureClass::GentleCurve
        };
        let dir = if kappa > 0.0 { CurveDirection::Left } else { CurveDirection::Right };
        (class, dir)
    };

    let idx = scan.argmin();
    let offsets = ray_offsets(scan.ranges.len());
    let obstacle_ahead = scan.d_min < scan.max_range && offsets[idx].abs() <= th.ahead_half_angle;
    let obstacle_distance_class = if !obstacle_ahead {
        DistanceClass::None
    } else if scan.d_min < th.near {
        DistanceClass::Near
    } else if scan.d_min < th.mid {
        DistanceClass::Mid
    } else {
        DistanceClass::Far
    };

    let lane_marking_visible = state.lateral_offset.abs() < track.lane_width / 2.0
        && state.heading_error.abs() < std::f64::consts::FRAC_PI_4;

    SceneDescriptor {
        curvature_class,
        curve_direction,
        obstacle_ahead,
        obstacle_distance_class,
        lane_marking_visible,
    }
}
