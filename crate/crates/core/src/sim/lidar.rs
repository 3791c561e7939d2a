//! Planar LiDAR: a forward 180 degree fan of rays cast against obstacles
//! and guardrails.

use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, Vec2};
use crate::sim::track::{Piece, TrackSpec};
use crate::sim::vehicle::VehicleState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarConfig {
    pub rays: usize,
    pub max_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self { rays: 180, max_range: 12.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    /// Index 0 points 90 degrees left of the heading, the last index 90 degrees right.
    pub ranges: Vec<f64>,
    pub max_range: f64,
    pub d_min: f64,
}

impl LidarScan {
    pub fn from_ranges(ranges: Vec<f64>, max_range: f64) -> Self {
        let d_min = ranges.iter().copied().fold(f64::INFINITY, f64::min);
        Self { ranges, max_range, d_min }
    }

    /// Index of the shortest ray (first one on ties).
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &r) in self.ranges.iter().enumerate() {
            if r < self.ranges[best] {
                best = i;
            }
        }
        best
    }
}

/// Ray angles relative to the heading, mirror-symmetric bit for bit:
/// `offsets[R-1-i] == -offsets[i]`.
pub fn ray_offsets(rays: usize) -> Vec<f64> {
    let step = std::f64::consts::PI / rays as f64;
    let mut out = vec![0.0; rays];
    for i in 0..rays.div_ceil(2) {
        let a = std::f64::consts::FRAC_PI_2 - (i as f64 + 0.5) * step;
        out[i] = a;
        out[rays - 1 - i] = -a;
    }
    out
}

/// Smallest positive `t` with `|origin + t*dir - center| = radius`.
fn ray_circle(origin: Vec2, dir: Vec2, center: Vec2, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.dot(oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    if t0 > 0.0 {
        return Some(t0);
    }
    let t1 = -b + sq;
    (t1 > 0.0).then_some(t1)
}

fn ray_segment(origin: Vec2, dir: Vec2, a: Vec2, b: Vec2) -> Option<f64> {
    let e = b - a;
    let denom = dir.cross(e);
    if denom == 0.0 {
        return None;
    }
    let w = a - origin;
    let t = w.cross(e) / denom;
    let u = w.cross(dir) / denom;
    (t > 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

/// Hits of a ray with the guardrail running `offset` to the right (negative:
/// left) of `piece`.
fn ray_rail(origin: Vec2, dir: Vec2, piece: &Piece, offset: f64) -> Option<f64> {
    if piece.curvature == 0.0 {
        let n = Vec2::from_angle(piece.heading).right() * offset;
        return ray_segment(origin, dir, piece.point_at(0.0) + n, piece.point_at(piece.length) + n);
    }
    let k = piece.curvature;
    // Radius of the rail circle; a rail on the inside of the turn is closer to the center.
    let radius = 1.0 / k.abs() + offset * k.signum();
    if radius <= 0.0 {
        return None;
    }
    let c = piece.center();
    let phi0 = (piece.start - c).angle();
    let on_arc = |t: f64| {
        let q = origin + dir * t;
        let u = wrap_angle((q - c).angle() - phi0) / k;
        (-1e-12..=piece.length + 1e-12).contains(&u)
    };
    let oc = origin - c;
    let b = oc.dot(dir);
    let disc = b * b - (oc.dot(oc) - radius * radius);
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    [-b - sq, -b + sq].into_iter().find(|&t| t > 0.0 && on_arc(t))
}

/// Casts the scan from the vehicle position.
pub fn cast_lidar(state: &VehicleState, track: &TrackSpec, cfg: &LidarConfig) -> LidarScan {
    let origin = state.position;
    let reach = cfg.max_range + track.guardrail_offset + 1.0;
    let pieces: Vec<&Piece> = track
        .pieces_in(state.progress - reach, state.progress + reach)
        .collect();
    let obstacles: Vec<_> = track
        .obstacles
        .iter()
        .filter(|o| (o.position - origin).norm() - o.radius < cfg.max_range)
        .collect();

    let ranges = ray_offsets(cfg.rays)
        .into_iter()
        .map(|off| {
            let dir = Vec2::from_angle(state.heading + off);
            let mut best = cfg.max_range;
            for o in &obstacles {
                if let Some(t) = ray_circle(origin, dir, o.position, o.radius) {
                    best = best.min(t);
                }
            }
            for p in &pieces {
                for side in [1.0, -1.0] {
                    if let Some(t) = ray_rail(origin, dir, p, side * track.guardrail_offset) {
                        best = best.min(t);
                    }
                }
            }
            best.max(f64::MIN_POSITIVE)
        })
        .collect();
    LidarScan::from_ranges(ranges, cfg.max_range)
}
