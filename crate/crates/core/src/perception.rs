//! Front-view lane raster and Hough-transform lane offset estimation.
//!
//! Image columns are indexed `0..W` with the optical axis on column `W/2`;
//! row `H-1` (bottom) is the reference row closest to the vehicle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::reward::m_to_px;
use crate::sim::track::Piece;
use crate::sim::{TrackSpec, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    Hough,
    GroundTruth,
    GroundTruthNoisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub height: usize,
    pub width: usize,
    /// Pixels per metre at the bottom row.
    pub px_per_m: f64,
    /// Ground distance seen by the bottom row (m).
    pub near_distance: f64,
    /// Ground distance seen by the top row (m).
    pub far_distance: f64,
    pub line_half_width_px: f64,
    pub road_intensity: f64,
    pub offroad_intensity: f64,
    pub binarize_threshold: f64,
    /// Hough angles span `[-max_theta_deg, max_theta_deg]` in 1 degree bins.
    pub max_theta_deg: i32,
    pub min_votes: u32,
    /// Minimum column separation at the reference row between the two lines.
    pub min_separation_px: f64,
    pub mode: OffsetMode,
    pub noise_sigma_px: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            px_per_m: 6.0,
            near_distance: 4.0,
            far_distance: 30.0,
            line_half_width_px: 0.75,
            road_intensity: 0.15,
            offroad_intensity: 0.05,
            binarize_threshold: 0.5,
            max_theta_deg: 80,
            min_votes: 16,
            min_separation_px: 4.0,
            mode: OffsetMode::Hough,
            noise_sigma_px: 2.0,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 || self.height > 224 || self.width > 224 {
            return Err(Error::Config("perception raster size must be within 8..=224".into()));
        }
        if !(self.px_per_m > 0.0 && self.near_distance > 0.0 && self.far_distance > self.near_distance) {
            return Err(Error::Config("perception camera geometry is invalid".into()));
        }
        if !(self.noise_sigma_px >= 0.0) {
            return Err(Error::Config("perception.noise_sigma_px must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneRaster {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub px_per_m: f64,
}

impl LaneRaster {
    pub fn blank(height: usize, width: usize, px_per_m: f64) -> Self {
        Self { height, width, pixels: vec![0.0; height * width], px_per_m }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.width + col] = v;
    }

    /// Column mirrored about the optical axis `W/2` (integer division).
    /// For even widths column 0 has no partner and maps to itself.
    pub fn mirror_col(&self, c: usize) -> usize {
        let m = 2 * (self.width / 2);
        if c == 0 && m == self.width {
            0
        } else {
            m - c
        }
    }

    pub fn has_mirror(&self, c: usize) -> bool {
        !(c == 0 && self.width % 2 == 0)
    }

    /// Reflection about the optical-axis column. It is an involution and
    /// mirrors rendered scenes exactly.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..w {
                out.pixels[r * w + c] = self.pixels[r * w + self.mirror_col(c)];
            }
        }
        out
    }

    /// Binary portable graymap (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

/// Renders the road ahead under a flat-ground pinhole projection. Only the
/// ground band between `near_distance` and `far_distance` (below the horizon)
/// is imaged.
pub fn render_raster(state: &VehicleState, track: &TrackSpec, cfg: &PerceptionConfig) -> LaneRaster {
    let (h, w) = (cfg.height, cfg.width);
    let mut raster = LaneRaster::blank(h, w, cfg.px_per_m);
    let fwd = Vec2::from_angle(state.heading);
    let right = fwd.right();
    let half_lane = track.lane_width / 2.0;
    let (inv_far, inv_near) = (1.0 / cfg.far_distance, 1.0 / cfg.near_distance);
    let lo = state.progress - 5.0;
    let hi = state.progress + cfg.far_distance + 15.0;
    let mut pieces: Vec<&Piece> = track.pieces_in(lo, hi).collect();
    if pieces.is_empty() {
        pieces = track.pieces().iter().collect();
    }
    for r in 0..h {
        let t = if h > 1 { r as f64 / (h - 1) as f64 } else { 1.0 };
        let z = 1.0 / (inv_far + (inv_near - inv_far) * t);
        let ppm = cfg.px_per_m * cfg.near_distance / z;
        let ahead = state.position + fwd * z;
        let s_row = state.progress + z;
        if let Some(i) = pieces.iter().position(|p| p.s0 <= s_row && s_row <= p.end_s()) {
            pieces.swap(0, i);
        }
        for c in 0..w {
            let x = (c as f64 - (w / 2) as f64) / ppm;
            let ground = ahead + right * x;
            let lat = TrackSpec::lateral_among(&pieces, ground);
            let base = if lat.abs() <= half_lane + 1.0 { cfg.road_intensity } else { cfg.offroad_intensity };
            let d_px = (lat.abs() - half_lane).abs() * ppm;
            let line = (cfg.line_half_width_px + 0.5 - d_px).clamp(0.0, 1.0);
            raster.pixels[r * w + c] = base.max(line);
        }
    }
    raster
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoughLine {
    /// Pixels, `rho = (col - origin_col)*cos(theta) + row*sin(theta)`.
    pub rho: f64,
    pub theta: f64,
    pub votes: u32,
    /// Column of the accumulator origin (the optical axis).
    pub origin_col: f64,
}

impl HoughLine {
    /// Column where the line crosses `row`.
    pub fn col_at(&self, row: f64) -> f64 {
        self.origin_col + self.axis_offset_at(row)
    }

    /// Signed column distance from the optical axis at `row`.
    pub fn axis_offset_at(&self, row: f64) -> f64 {
        (self.rho - row * self.theta.sin()) / self.theta.cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneEstimate {
    /// Positive when the vehicle sits right of the lane centre.
    pub offset_px: f64,
    pub confidence: f64,
    pub left_line: Option<HoughLine>,
    pub right_line: Option<HoughLine>,
}

impl LaneEstimate {
    pub fn none() -> Self {
        Self { offset_px: 0.0, confidence: 0.0, left_line: None, right_line: None }
    }
}

/// Hough vote table over `(theta, rho)` with 1 degree and 1 pixel bins.
///
/// Columns are measured from the optical axis so that a mirrored raster
/// votes into the mirrored bin `(-theta, -rho)`.
pub struct HoughAccumulator {
    pub thetas_deg: Vec<i32>,
    pub rho_offset: i32,
    pub n_rho: usize,
    pub origin_col: i32,
    pub votes: Vec<u32>,
}

impl HoughAccumulator {
    pub fn accumulate(raster: &LaneRaster, threshold: f64, max_theta_deg: i32) -> Self {
        let thetas_deg: Vec<i32> = (-max_theta_deg..=max_theta_deg).collect();
        let diag = ((raster.width * raster.width + raster.height * raster.height) as f64).sqrt().ceil() as i32;
        let n_rho = (2 * diag + 1) as usize;
        let mut votes = vec![0u32; thetas_deg.len() * n_rho];
        let trig: Vec<(f64, f64)> = thetas_deg.iter().map(|&d| (d as f64).to_radians().sin_cos()).collect();
        let origin_col = (raster.width / 2) as i32;
        let mut bright: Vec<(f64, f64)> = Vec::new();
        for r in 0..raster.height {
            for c in 0..raster.width {
                // The leftmost column has no mirror partner when W is even.
                if raster.get(r, c) >= threshold && raster.has_mirror(c) {
                    bright.push(((c as i32 - origin_col) as f64, r as f64));
                }
            }
        }
        for (ti, &(s, co)) in trig.iter().enumerate() {
            let row = &mut votes[ti * n_rho..(ti + 1) * n_rho];
            for &(x, r) in &bright {
                let rho = (x * co + r * s).round() as i32;
                row[(rho + diag) as usize] += 1;
            }
        }
        Self { thetas_deg, rho_offset: diag, n_rho, origin_col, votes }
    }

    fn line(&self, ti: usize, ri: usize) -> HoughLine {
        HoughLine {
            rho: (ri as i32 - self.rho_offset) as f64,
            theta: (self.thetas_deg[ti] as f64).to_radians(),
            votes: self.votes[ti * self.n_rho + ri],
            origin_col: self.origin_col as f64,
        }
    }
}

/// Detects the two lane boundaries and returns the lateral offset of the
/// vehicle from their midpoint at the bottom row.
///
/// Pixels at or above the binarization threshold vote; among bins with at
/// least `min_votes` the strongest line is taken first, then the strongest
/// line whose image slope has the opposite sign (vertical lines count as
/// either side) and that crosses the bottom row at least
/// `min_separation_px` away from the first.
pub fn hough_lane_offset(raster: &LaneRaster, cfg: &PerceptionConfig) -> LaneEstimate {
    let acc = HoughAccumulator::accumulate(raster, cfg.binarize_threshold, cfg.max_theta_deg);
    let mut candidates: Vec<(u32, usize, usize)> = Vec::new();
    for ti in 0..acc.thetas_deg.len() {
        for ri in 0..acc.n_rho {
            let v = acc.votes[ti * acc.n_rho + ri];
            if v >= cfg.min_votes {
                candidates.push((v, ti, ri));
            }
        }
    }
    // Strongest first; ties broken by smaller |theta|, then position.
    candidates.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(acc.thetas_deg[a.1].abs().cmp(&acc.thetas_deg[b.1].abs()))
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let Some(&(_, t1, r1)) = candidates.first() else {
        return LaneEstimate::none();
    };
    let bottom = (raster.height - 1) as f64;
    let first = acc.line(t1, r1);
    let s1 = acc.thetas_deg[t1].signum();
    let x1 = first.axis_offset_at(bottom);
    let second = candidates.iter().skip(1).find_map(|&(_, ti, ri)| {
        let line = acc.line(ti, ri);
        let opposite = acc.thetas_deg[ti].signum() * s1 <= 0;
        (opposite && (line.axis_offset_at(bottom) - x1).abs() >= cfg.min_separation_px).then_some(line)
    });
    let Some(second) = second else {
        return LaneEstimate::none();
    };
    let x2 = second.axis_offset_at(bottom);
    let (left, right) = if x1 <= x2 { (first, second) } else { (second, first) };
    let half = (raster.width / 2) as f64;
    let xl = refine_bottom_offset(raster, &left, cfg.binarize_threshold);
    let xr = refine_bottom_offset(raster, &right, cfg.binarize_threshold);
    // image_center - midpoint, in axis-relative columns.
    let offset_px = (-0.5 * (xl + xr)).clamp(-half, half);
    let confidence = ((first.votes + second.votes) as f64 / (2 * raster.height) as f64).min(1.0);
    LaneEstimate { offset_px, confidence, left_line: Some(left), right_line: Some(right) }
}

/// Sub-pixel position of `line` at the bottom row: per-row centroids of the
/// above-threshold intensity within two columns of the line, then a least
/// squares fit over rows. Sums are formed symmetrically around the line so a
/// mirrored raster yields the exactly negated result.
fn refine_bottom_offset(raster: &LaneRaster, line: &HoughLine, threshold: f64) -> f64 {
    let half = (raster.width / 2) as i32;
    let bottom = (raster.height - 1) as f64;
    let weight = |r: usize, x: i32| -> f64 {
        let c = x + half;
        if c < 0 || c >= raster.width as i32 || !raster.has_mirror(c as usize) {
            0.0
        } else {
            (raster.get(r, c as usize) - threshold).max(0.0)
        }
    };
    let (mut n, mut sy, mut sx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in 0..raster.height {
        let x0 = line.axis_offset_at(r as f64).round() as i32;
        let w0 = weight(r, x0);
        let mut wsum = w0;
        let mut msum = w0 * x0 as f64;
        for k in 1..=2 {
            let (wa, wb) = (weight(r, x0 - k), weight(r, x0 + k));
            wsum += wa + wb;
            msum += wa * (x0 - k) as f64 + wb * (x0 + k) as f64;
        }
        if wsum > 0.0 {
            let y = r as f64 - bottom;
            let x = msum / wsum;
            n += 1.0;
            sy += y;
            sx += x;
            syy += y * y;
            sxy += x * y;
        }
    }
    let det = n * syy - sy * sy;
    if n < 2.0 || det <= 0.0 {
        return line.axis_offset_at(bottom);
    }
    // Intercept at y = 0 (the bottom row).
    (sx * syy - sy * sxy) / det
}

/// Lateral offset handed to the controller, in reward-scale pixels.
///
/// In Hough mode a failed detection repeats the last valid value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetTracker {
    pub last_valid_px: f64,
    rng: ChaCha8Rng,
}

impl OffsetTracker {
    pub fn new(seed: u64) -> Self {
        Self { last_valid_px: 0.0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn reset(&mut self) {
        self.last_valid_px = 0.0;
    }

    /// `raster_px_per_m` converts the raster-space Hough estimate to metres.
    pub fn offset_for_control(
        &mut self,
        estimate: &LaneEstimate,
        ground_truth_px: f64,
        mode: OffsetMode,
        raster_px_per_m: f64,
        noise_sigma_px: f64,
    ) -> f64 {
        match mode {
            OffsetMode::GroundTruth => ground_truth_px,
            OffsetMode::GroundTruthNoisy => {
                let n = Normal::new(0.0, noise_sigma_px).expect("sigma is non-negative");
                ground_truth_px + n.sample(&mut self.rng)
            }
            OffsetMode::Hough => {
                if estimate.confidence > 0.0 {
                    self.last_valid_px = m_to_px(estimate.offset_px / raster_px_per_m);
                }
                self.last_valid_px
            }
        }
    }
}
