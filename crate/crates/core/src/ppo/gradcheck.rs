//! Central finite-difference check of the analytic loss gradient.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fusion::Observation;
use crate::perception::LaneRaster;

use super::network::{FusionNet, NetConfig};
use super::policy::log_prob;
use super::update::{ppo_loss_values, ppo_losses, PpoConfig, Sample};

/// Gradients smaller than this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub params: usize,
    pub batches: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(REL_ERR_FLOOR)
}

fn random_obs(c: &NetConfig, rng: &mut ChaCha8Rng) -> Observation {
    let mut raster = LaneRaster::blank(c.height, c.width, 6.0);
    for v in &mut raster.pixels {
        *v = rng.random_range(0.0..1.0);
    }
    Observation {
        raster,
        lidar_norm: (0..c.rays).map(|_| rng.random_range(0.0..1.0)).collect(),
        pid_norm: rng.random_range(-1.0..1.0),
        semantic: (0..c.semantic_dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
    }
}

/// Random network, random batches; every parameter is perturbed by `±h`.
pub fn gradcheck(seed: u64, batches: usize, batch_size: usize, h: f64) -> Result<GradcheckReport> {
    let cfg = NetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = FusionNet::new(cfg, seed)?;
    let l = net.layout();
    // Exercise the heads and the log-std path away from initial values.
    for v in &mut net.params[l.actor_w.clone()] {
        *v = rng.random_range(-0.2..0.2);
    }
    for r in l.log_std.clone() {
        net.params[r] = rng.random_range(-1.0..0.5);
    }
    let pcfg = PpoConfig { entropy_coef: 0.01, ..PpoConfig::default() };
    let names = l.tensors();
    let mut report = GradcheckReport {
        params: net.num_params(),
        batches,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for _ in 0..batches {
        let mut samples = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let obs = Arc::new(random_obs(&cfg, &mut rng));
            let (mean, log_std, _) = net.forward_one(&obs)?;
            let action = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            // Ratios stay well inside the clip range so the surrogate is smooth.
            let old_log_prob = log_prob(action, mean, log_std) + rng.random_range(-0.05..0.05);
            samples.push(Sample { obs, action, old_log_prob, advantage: rng.random_range(-2.0..2.0), ret: rng.random_range(-1.0..1.0) });
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let (_, grad) = ppo_losses(&net, &refs, &pcfg)?;
        for i in 0..net.params.len() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let plus = ppo_loss_values(&net, &refs, &pcfg)?.total;
            net.params[i] = orig - h;
            let minus = ppo_loss_values(&net, &refs, &pcfg)?.total;
            net.params[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let e = relative_error(grad[i], numeric);
            if e > report.max_rel_error {
                let (name, range) = names.iter().find(|(_, r)| r.contains(&i)).expect("index inside layout");
                report.max_rel_error = e;
                report.worst_tensor = name.to_string();
                report.worst_index = i - range.start;
                report.worst_analytic = grad[i];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
