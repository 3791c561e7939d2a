//! Normalized multimodal observations, transitions and left-right mirror
//! augmentation.

use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::LaneRaster;
use crate::sim::{LidarScan, SceneDescriptor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub raster: LaneRaster,
    /// Ranges divided by the LiDAR max range, in `[0, 1]`.
    pub lidar_norm: Vec<f64>,
    /// PID output divided by its bound, in `[-1, 1]`.
    pub pid_norm: f64,
    pub semantic: Vec<f64>,
}

impl Observation {
    /// Left-right mirror: raster reflected about its axis, LiDAR reversed,
    /// PID sign flipped. The semantic vector is copied.
    pub fn mirrored(&self) -> Self {
        Self {
            raster: self.raster.flip_horizontal(),
            lidar_norm: self.lidar_norm.iter().rev().copied().collect(),
            pid_norm: -self.pid_norm,
            semantic: self.semantic.clone(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.raster.pixels.iter().all(|v| (0.0..=1.0).contains(v))
            && self.lidar_norm.iter().all(|v| (0.0..=1.0).contains(v))
            && self.pid_norm.abs() <= 1.0
            && self.semantic.iter().all(|v| v.is_finite())
    }
}

/// Per-dimension standardizer whose statistics are accumulated (Welford)
/// during a warmup and then frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticNormalizer {
    pub warmup: u64,
    pub count: u64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
}

const NORM_EPS: f64 = 1e-8;

impl SemanticNormalizer {
    pub fn new(dim: usize, warmup: u64) -> Self {
        Self { warmup, count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn frozen(&self) -> bool {
        self.count >= self.warmup
    }

    pub fn std(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![1.0; self.mean.len()];
        }
        self.m2.iter().map(|m| (m / self.count as f64 + NORM_EPS).sqrt()).collect()
    }

    pub fn observe(&mut self, e: &[f64]) -> Result<()> {
        if e.len() != self.mean.len() {
            return Err(Error::Shape { context: "semantic normalizer", expected: self.mean.len(), got: e.len() });
        }
        if self.frozen() {
            return Ok(());
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, m2), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(e) {
            let delta = x - *m;
            *m += delta / n;
            *m2 += delta * (x - *m);
        }
        Ok(())
    }

    pub fn apply(&self, e: &[f64]) -> Vec<f64> {
        let std = self.std();
        e.iter().zip(&self.mean).zip(&std).map(|((x, m), s)| (x - m) / s).collect()
    }
}

/// Which observation branches carry data. Disabled branches are zeroed so
/// the network shape never changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchMask {
    pub semantic: bool,
    pub pid: bool,
}

impl Default for BranchMask {
    fn default() -> Self {
        Self { semantic: true, pid: true }
    }
}

/// Builds an observation. `semantic` must already be standardized.
pub fn assemble_observation(raster: LaneRaster, scan: &LidarScan, u: f64, u_max: f64, semantic: Vec<f64>, mask: BranchMask) -> Result<Observation> {
    if !(u_max > 0.0) {
        return Err(Error::InvalidArgument(format!("u_max must be positive, got {u_max}")));
    }
    if raster.pixels.len() != raster.height * raster.width {
        return Err(Error::Shape { context: "raster pixels", expected: raster.height * raster.width, got: raster.pixels.len() });
    }
    if !u.is_finite() || semantic.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation"));
    }
    let lidar_norm = scan.ranges.iter().map(|r| r.clamp(0.0, scan.max_range) / scan.max_range).collect();
    let pid_norm = if mask.pid { (u / u_max).clamp(-1.0, 1.0) } else { 0.0 };
    let semantic = if mask.semantic { semantic } else { vec![0.0; semantic.len()] };
    Ok(Observation { raster, lidar_norm, pid_norm, semantic })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Arc<Observation>,
    pub action: [f64; 2],
    pub reward: f64,
    pub next_obs: Arc<Observation>,
    pub done: bool,
    pub log_prob: f64,
    pub value: f64,
    /// Scene behind `obs` and `next_obs`, for token regeneration.
    pub scene: Option<(SceneDescriptor, SceneDescriptor)>,
}

/// Recomputes the (standardized) semantic vector of a mirrored observation
/// from the mirrored scene and raster.
pub type TokenRegenerator<'a> = &'a dyn Fn(&SceneDescriptor, &LaneRaster) -> Result<Vec<f64>>;

fn mirror_obs(obs: &Observation, scene: Option<&SceneDescriptor>, regen: Option<TokenRegenerator>) -> Result<Observation> {
    let mut m = obs.mirrored();
    if let (Some(regen), Some(scene)) = (regen, scene) {
        // A masked-out branch stays zero.
        if obs.semantic.iter().any(|&v| v != 0.0) {
            m.semantic = regen(&scene.mirrored(), &m.raster)?;
        }
    }
    Ok(m)
}

/// Mirrors a transition. With `regen = None` the semantic vectors are copied
/// and the operation is an exact involution.
pub fn mirror_transition(t: &Transition, regen: Option<TokenRegenerator>) -> Result<Transition> {
    let scenes = t.scene.as_ref();
    Ok(Transition {
        obs: Arc::new(mirror_obs(&t.obs, scenes.map(|s| &s.0), regen)?),
        action: [-t.action[0], t.action[1]],
        reward: t.reward,
        next_obs: Arc::new(mirror_obs(&t.next_obs, scenes.map(|s| &s.1), regen)?),
        done: t.done,
        log_prob: t.log_prob,
        value: t.value,
        scene: t.scene.map(|(a, b)| (a.mirrored(), b.mirrored())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Off,
    EveryStep,
    EveryT,
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "every_step" => Ok(Self::EveryStep),
            "every_t" | "every_T" => Ok(Self::EveryT),
            other => Err(Error::Config(format!("unknown augmentation mode {other:?}"))),
        }
    }
}

/// `(source index, mirrored)` pairs describing the augmented buffer.
pub fn augment_plan(n: usize, mode: AugmentMode, t_aug: usize) -> Result<Vec<(usize, bool)>> {
    if t_aug == 0 {
        return Err(Error::InvalidArgument("T_aug must be at least 1".into()));
    }
    Ok(match mode {
        AugmentMode::Off => (0..n).map(|i| (i, false)).collect(),
        AugmentMode::EveryStep => (0..n).flat_map(|i| [(i, false), (i, true)]).collect(),
        AugmentMode::EveryT => (0..n)
            .map(|i| (i, false))
            .chain((0..n).step_by(t_aug).map(|i| (i, true)))
            .collect(),
    })
}

/// `every_step` interleaves each transition with its mirror; `every_t`
/// appends mirrors of indices divisible by `t_aug`.
pub fn augment_buffer(buffer: &[Transition], mode: AugmentMode, t_aug: usize, regen: Option<TokenRegenerator>) -> Result<Vec<Transition>> {
    augment_plan(buffer.len(), mode, t_aug)?
        .into_iter()
        .map(|(i, m)| if m { mirror_transition(&buffer[i], regen) } else { Ok(buffer[i].clone()) })
        .collect()
}

#[derive(Serialize)]
struct TransitionLine<'a> {
    index: usize,
    action: [f64; 2],
    reward: f64,
    done: bool,
    log_prob: f64,
    value: f64,
    lidar_norm: &'a [f64],
    pid_norm: f64,
    semantic: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    raster: Option<&'a [f64]>,
}

/// One JSON object per line. Rasters are included only with `full`.
pub fn write_jsonl<W: Write>(out: &mut W, buffer: &[Transition], full: bool) -> Result<()> {
    for (index, t) in buffer.iter().enumerate() {
        let line = TransitionLine {
            index,
            action: t.action,
            reward: t.reward,
            done: t.done,
            log_prob: t.log_prob,
            value: t.value,
            lidar_norm: &t.obs.lidar_norm,
            pid_norm: t.obs.pid_norm,
            semantic: &t.obs.semantic,
            raster: full.then_some(&t.obs.raster.pixels[..]),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
