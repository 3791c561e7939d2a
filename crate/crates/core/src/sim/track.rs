//! Track geometry: a C1 centerline made of straight and constant-curvature
//! pieces, roadside guardrails and static circular obstacles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Line { length: f64 },
    /// Signed curvature in 1/m, positive turns left (counter-clockwise).
    Arc { length: f64, curvature: f64 },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Line { length } | Segment::Arc { length, .. } => length,
        }
    }

    pub fn curvature(&self) -> f64 {
        match *self {
            Segment::Line { .. } => 0.0,
            Segment::Arc { curvature, .. } => curvature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub position: Vec2,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackProfile {
    Straight,
    Curves,
    Mixed,
}

impl std::str::FromStr for TrackProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Self::Straight),
            "curves" => Ok(Self::Curves),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::InvalidArgument(format!("unknown track profile `{other}`"))),
        }
    }
}

/// Parameters of the procedural track generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    pub length: f64,
    pub lane_width: f64,
    pub min_turn_radius: f64,
    pub max_turn_radius: f64,
    /// Lateral distance of the guardrails from the centerline.
    pub guardrail_offset: f64,
    /// Straight lead-in at the start of every track, kept free of obstacles.
    pub lead_in: f64,
    /// Roadside obstacles are only placed on `mixed` tracks.
    pub obstacle_spacing: (f64, f64),
    pub obstacle_lateral: (f64, f64),
    pub obstacle_radius: (f64, f64),
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            length: 700.0,
            lane_width: 5.0,
            min_turn_radius: 20.0,
            max_turn_radius: 150.0,
            guardrail_offset: 12.5,
            lead_in: 30.0,
            obstacle_spacing: (40.0, 90.0),
            obstacle_lateral: (4.0, 6.0),
            obstacle_radius: (0.5, 1.0),
        }
    }
}

/// A centerline piece laid out in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub start: Vec2,
    pub heading: f64,
    pub s0: f64,
    pub length: f64,
    pub curvature: f64,
    dir: Vec2,
    /// Arc center and start angle about it; unused for lines.
    arc_center: Vec2,
    arc_phi0: f64,
    arc_end: Vec2,
}

/// Closest centerline point to a query position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub point: Vec2,
    pub heading: f64,
    pub curvature: f64,
    /// Signed offset of the query point, positive to the right of the centerline.
    pub lateral: f64,
    pub distance: f64,
}

impl Piece {
    pub fn new(start: Vec2, heading: f64, s0: f64, length: f64, curvature: f64) -> Self {
        let dir = Vec2::from_angle(heading);
        let (arc_center, arc_phi0) = if curvature == 0.0 {
            (start, 0.0)
        } else {
            let c = start + dir.left() * (1.0 / curvature);
            (c, (start - c).angle())
        };
        let mut piece = Self { start, heading, s0, length, curvature, dir, arc_center, arc_phi0, arc_end: start };
        piece.arc_end = piece.point_at(length) - arc_center;
        piece
    }

    /// Signed lateral offset (+ right) and distance of `p` to this piece.
    /// Agrees with `project` up to rounding. Arcs whose circle lies at least
    /// `bound` away report an infinite distance without further work.
    pub fn lateral_distance(&self, p: Vec2, bound: f64) -> (f64, f64) {
        if self.curvature == 0.0 {
            let rel = p - self.start;
            let u = rel.dot(self.dir);
            let lat = rel.dot(self.dir.right());
            let along = u - u.clamp(0.0, self.length);
            return (lat, (lat * lat + along * along).sqrt());
        }
        let rel = p - self.arc_center;
        let r = rel.norm();
        if (r - 1.0 / self.curvature.abs()).abs() >= bound {
            // Farther than `bound` from the whole circle.
            return (0.0, f64::INFINITY);
        }
        // Sweeps stay below a half turn, so two cross products decide
        // whether the radial through `p` meets the arc.
        let sg = self.curvature.signum();
        let a = self.start - self.arc_center;
        let b = self.arc_end;
        let inside = self.length * self.curvature.abs() < std::f64::consts::PI
            && sg * a.cross(rel) >= 0.0
            && sg * rel.cross(b) >= 0.0;
        if r > 0.0 && inside {
            let lat = self.curvature.signum() * (r - 1.0 / self.curvature.abs());
            (lat, lat.abs())
        } else {
            let proj = self.project(p);
            (proj.lateral, proj.distance)
        }
    }

    pub fn end_s(&self) -> f64 {
        self.s0 + self.length
    }

    pub fn point_at(&self, u: f64) -> Vec2 {
        let k = self.curvature;
        if k == 0.0 {
            self.start + Vec2::from_angle(self.heading) * u
        } else {
            let (s1, c1) = (self.heading + k * u).sin_cos();
            let (s0, c0) = self.heading.sin_cos();
            self.start + Vec2::new((s1 - s0) / k, -(c1 - c0) / k)
        }
    }

    pub fn heading_at(&self, u: f64) -> f64 {
        self.heading + self.curvature * u
    }

    /// Center of the osculating circle; only meaningful for arcs.
    pub fn center(&self) -> Vec2 {
        self.arc_center
    }

    /// Arc-length parameter of the point on this piece nearest to `p`, clamped to the piece.
    pub fn nearest_param(&self, p: Vec2) -> f64 {
        if self.curvature == 0.0 {
            (p - self.start).dot(self.dir).clamp(0.0, self.length)
        } else {
            let rel = p - self.arc_center;
            if rel.norm() == 0.0 {
                return 0.0;
            }
            let dphi = wrap_angle(rel.angle() - self.arc_phi0);
            let u = dphi / self.curvature;
            if (0.0..=self.length).contains(&u) {
                u
            } else {
                // Outside the swept angle: pick the closer endpoint.
                let d0 = (self.point_at(0.0) - p).norm();
                let d1 = (self.point_at(self.length) - p).norm();
                if d0 <= d1 {
                    0.0
                } else {
                    self.length
                }
            }
        }
    }

    pub fn project(&self, p: Vec2) -> Projection {
        let u = self.nearest_param(p);
        let point = self.point_at(u);
        let heading = self.heading_at(u);
        let right = Vec2::from_angle(heading).right();
        Projection {
            s: self.s0 + u,
            point,
            heading: wrap_angle(heading),
            curvature: self.curvature,
            lateral: (p - point).dot(right),
            distance: (p - point).norm(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrackDoc {
    segments: Vec<Segment>,
    lane_width: f64,
    guardrail_offset: f64,
    obstacles: Vec<Obstacle>,
    seed: u64,
    profile: Option<TrackProfile>,
}

/// A road: centerline segments starting at the origin heading along +x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrackDoc", into = "TrackDoc")]
pub struct TrackSpec {
    pub segments: Vec<Segment>,
    pub lane_width: f64,
    pub guardrail_offset: f64,
    pub obstacles: Vec<Obstacle>,
    pub seed: u64,
    pub profile: Option<TrackProfile>,
    pieces: Vec<Piece>,
}

impl TryFrom<TrackDoc> for TrackSpec {
    type Error = Error;

    fn try_from(doc: TrackDoc) -> Result<Self> {
        let mut t = TrackSpec::new(doc.segments, doc.lane_width, doc.guardrail_offset, doc.obstacles)?;
        t.seed = doc.seed;
        t.profile = doc.profile;
        Ok(t)
    }
}

impl From<TrackSpec> for TrackDoc {
    fn from(t: TrackSpec) -> Self {
        TrackDoc {
            segments: t.segments,
            lane_width: t.lane_width,
            guardrail_offset: t.guardrail_offset,
            obstacles: t.obstacles,
            seed: t.seed,
            profile: t.profile,
        }
    }
}

impl TrackSpec {
    pub fn new(
        segments: Vec<Segment>,
        lane_width: f64,
        guardrail_offset: f64,
        obstacles: Vec<Obstacle>,
    ) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidArgument("track needs at least one segment".into()));
        }
        if !(lane_width > 0.0 && lane_width.is_finite()) {
            return Err(Error::InvalidArgument(format!("lane width {lane_width} must be positive")));
        }
        if !(guardrail_offset >= lane_width / 2.0) {
            return Err(Error::InvalidArgument("guardrails must lie outside the lane".into()));
        }
        let mut pieces = Vec::with_capacity(segments.len());
        let mut start = Vec2::new(0.0, 0.0);
        let mut heading = 0.0;
        let mut s0 = 0.0;
        for seg in &segments {
            let length = seg.length();
            let curvature = seg.curvature();
            if !(length > 0.0 && length.is_finite() && curvature.is_finite()) {
                return Err(Error::InvalidArgument(format!("invalid segment {seg:?}")));
            }
            let piece = Piece::new(start, heading, s0, length, curvature);
            start = piece.point_at(length);
            heading = wrap_angle(piece.heading_at(length));
            s0 += length;
            pieces.push(piece);
        }
        for o in &obstacles {
            if !(o.radius > 0.0 && o.radius.is_finite()) {
                return Err(Error::InvalidArgument(format!("obstacle radius {} must be positive", o.radius)));
            }
        }
        Ok(Self {
            segments,
            lane_width,
            guardrail_offset,
            obstacles,
            seed: 0,
            profile: None,
            pieces,
        })
    }

    /// Straight road of the given length without obstacles.
    pub fn straight(length: f64, lane_width: f64) -> Result<Self> {
        Self::new(
            vec![Segment::Line { length }],
            lane_width,
            TrackConfig::default().guardrail_offset,
            Vec::new(),
        )
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn length(&self) -> f64 {
        self.pieces.last().map_or(0.0, Piece::end_s)
    }

    pub fn piece_at(&self, s: f64) -> &Piece {
        let idx = self.pieces.partition_point(|p| p.end_s() < s);
        &self.pieces[idx.min(self.pieces.len() - 1)]
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let p = self.piece_at(s);
        p.point_at((s - p.s0).clamp(0.0, p.length))
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let p = self.piece_at(s);
        wrap_angle(p.heading_at((s - p.s0).clamp(0.0, p.length)))
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.piece_at(s).curvature
    }

    /// Pieces overlapping the arc-length window `[lo, hi]`.
    pub fn pieces_in(&self, lo: f64, hi: f64) -> impl Iterator<Item = &Piece> {
        self.pieces.iter().filter(move |p| p.end_s() >= lo && p.s0 <= hi)
    }

    /// Nearest centerline point over the whole track.
    pub fn project(&self, p: Vec2) -> Projection {
        Self::nearest(self.pieces.iter(), p).expect("track has at least one piece")
    }

    /// Nearest centerline point among pieces overlapping `[lo, hi]`; falls back
    /// to a global search when the window is empty.
    pub fn project_local(&self, p: Vec2, lo: f64, hi: f64) -> Projection {
        Self::nearest(self.pieces_in(lo, hi), p).unwrap_or_else(|| self.project(p))
    }

    /// Lateral offset against the nearest of `pieces`. Putting the likely
    /// nearest piece first makes the search cheaper.
    pub fn lateral_among(pieces: &[&Piece], p: Vec2) -> f64 {
        let mut best = (0.0, f64::INFINITY);
        for piece in pieces {
            let ld = piece.lateral_distance(p, best.1);
            if ld.1 < best.1 {
                best = ld;
            }
        }
        best.0
    }

    fn nearest<'a>(pieces: impl Iterator<Item = &'a Piece>, p: Vec2) -> Option<Projection> {
        let mut best: Option<Projection> = None;
        for piece in pieces {
            let proj = piece.project(p);
            if best.map_or(true, |b| proj.distance < b.distance) {
                best = Some(proj);
            }
        }
        best
    }

    /// Maximum absolute curvature over the track.
    pub fn max_abs_curvature(&self) -> f64 {
        self.pieces.iter().map(|p| p.curvature.abs()).fold(0.0, f64::max)
    }

    /// World reflected across the start line (y -> -y): curvatures and
    /// obstacle offsets change sign.
    pub fn mirrored(&self) -> Self {
        let segments = self
            .segments
            .iter()
            .map(|s| match *s {
                Segment::Line { length } => Segment::Line { length },
                Segment::Arc { length, curvature } => Segment::Arc { length, curvature: -curvature },
            })
            .collect();
        let obstacles = self
            .obstacles
            .iter()
            .map(|o| Obstacle { position: o.position.mirror_y(), radius: o.radius })
            .collect();
        let mut t = Self::new(segments, self.lane_width, self.guardrail_offset, obstacles)
            .expect("mirror of a valid track is valid");
        t.seed = self.seed;
        t.profile = self.profile;
        t
    }
}

/// Deterministically generates a track for `(seed, profile)` with default parameters.
pub fn generate_track(seed: u64, profile: TrackProfile) -> TrackSpec {
    generate_track_with(seed, profile, &TrackConfig::default())
}

pub fn generate_track_with(seed: u64, profile: TrackProfile, cfg: &TrackConfig) -> TrackSpec {
    let salt = match profile {
        TrackProfile::Straight => 0x5354_5241,
        TrackProfile::Curves => 0x4355_5256,
        TrackProfile::Mixed => 0x4d49_5845,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    let length = cfg.length.max(200.0);
    let max_heading = 75f64.to_radians();

    let segments = match profile {
        TrackProfile::Straight => vec![Segment::Line { length }],
        TrackProfile::Curves | TrackProfile::Mixed => {
            let mut segs = vec![Segment::Line { length: cfg.lead_in }];
            let mut total = cfg.lead_in;
            let mut heading = 0.0f64;
            let mut want_arc = true;
            while total < length {
                let is_arc = match profile {
                    TrackProfile::Curves => want_arc,
                    _ => rng.random_bool(0.5),
                };
                let seg = if is_arc {
                    let radius = rng.random_range(cfg.min_turn_radius..=cfg.max_turn_radius);
                    let mut sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let turn = rng.random_range(20f64.to_radians()..=70f64.to_radians());
                    if (heading + sign * turn).abs() > max_heading {
                        sign = -heading.signum();
                    }
                    heading += sign * turn;
                    Segment::Arc { length: turn * radius, curvature: sign / radius }
                } else {
                    let range = match profile {
                        TrackProfile::Curves => 10.0..=30.0,
                        _ => 30.0..=100.0,
                    };
                    Segment::Line { length: rng.random_range(range) }
                };
                total += seg.length();
                segs.push(seg);
                want_arc = !want_arc;
            }
            segs
        }
    };

    let mut track = TrackSpec::new(segments, cfg.lane_width, cfg.guardrail_offset, Vec::new())
        .expect("generated segments are valid");
    if profile == TrackProfile::Mixed {
        let mut obstacles = Vec::new();
        let mut s = cfg.lead_in + rng.random_range(cfg.obstacle_spacing.0..=cfg.obstacle_spacing.1);
        while s < track.length() - 10.0 {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let lateral = side * rng.random_range(cfg.obstacle_lateral.0..=cfg.obstacle_lateral.1);
            let radius = rng.random_range(cfg.obstacle_radius.0..=cfg.obstacle_radius.1);
            let right = Vec2::from_angle(track.heading_at(s)).right();
            obstacles.push(Obstacle { position: track.point_at(s) + right * lateral, radius });
            s += rng.random_range(cfg.obstacle_spacing.0..=cfg.obstacle_spacing.1);
        }
        track.obstacles = obstacles;
    }
    track.seed = seed;
    track.profile = Some(profile);
    track
}

/// Versioned JSON document holding a pool of tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackPoolDoc {
    pub format: String,
    pub version: u32,
    pub tracks: Vec<TrackSpec>,
}

pub const TRACK_POOL_FORMAT: &str = "fuselane-track-pool";
pub const TRACK_POOL_VERSION: u32 = 1;

impl TrackPoolDoc {
    pub fn new(tracks: Vec<TrackSpec>) -> Self {
        Self { format: TRACK_POOL_FORMAT.into(), version: TRACK_POOL_VERSION, tracks }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.format != TRACK_POOL_FORMAT || doc.version != TRACK_POOL_VERSION {
            return Err(Error::Config(format!(
                "unsupported track pool document {} v{}",
                doc.format, doc.version
            )));
        }
        if doc.tracks.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
