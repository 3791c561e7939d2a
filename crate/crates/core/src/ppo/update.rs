//! Clipped-surrogate losses, Adam and the minibatch update.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{AugmentMode, Observation};

use super::network::FusionNet;
use super::policy::{entropy, log_prob};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub rollout_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    /// Floor `c A` on the objective of negative-advantage samples; `None`
    /// gives the plain clipped surrogate. Must exceed `1 + clip_eps`.
    pub dual_clip: Option<f64>,
    pub value_coef: f64,
    pub grad_clip: f64,
    pub total_steps: u64,
    pub entropy_coef: f64,
    pub adam_eps: f64,
    /// Updates abort when a minibatch critic loss exceeds this.
    pub max_critic_loss: f64,
    pub normalize_advantages: bool,
    pub augment: AugmentMode,
    /// Mirror period for `every_t` augmentation.
    pub t_aug: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            rollout_steps: 2048,
            batch_size: 64,
            epochs: 10,
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            dual_clip: Some(3.0),
            value_coef: 0.5,
            grad_clip: 0.5,
            total_steps: 100_000,
            entropy_coef: 0.0,
            adam_eps: 1e-5,
            max_critic_loss: 1e6,
            normalize_advantages: true,
            augment: AugmentMode::EveryStep,
            t_aug: 8,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if self.dual_clip.is_some_and(|c| !(c > 1.0 + self.clip_eps)) {
            return bad("dual_clip must exceed 1 + clip_eps");
        }
        if self.batch_size == 0 || self.rollout_steps == 0 || self.rollout_steps % self.batch_size != 0 {
            return bad("rollout_steps must be a positive multiple of batch_size");
        }
        if self.epochs == 0 || self.total_steps == 0 || self.t_aug == 0 {
            return bad("epochs, total_steps and t_aug must be positive");
        }
        if !(self.learning_rate > 0.0 && self.adam_eps > 0.0 && self.grad_clip > 0.0 && self.max_critic_loss > 0.0) {
            return bad("learning_rate, adam_eps, grad_clip and max_critic_loss must be positive");
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return bad("value_coef and entropy_coef must be non-negative");
        }
        Ok(())
    }

    /// Rollouts needed to collect at least `total_steps` transitions.
    pub fn num_updates(&self) -> u64 {
        self.total_steps.div_ceil(self.rollout_steps as u64)
    }
}

/// One training sample after advantage estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Arc<Observation>,
    /// Raw (unclipped) action.
    pub action: [f64; 2],
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// `min(r A, clip(r, 1-ε, 1+ε) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Clipped surrogate with the optional lower bound `c A` for `A < 0`.
pub fn dual_clipped_surrogate(ratio: f64, advantage: f64, eps: f64, dual: Option<f64>) -> f64 {
    let s = clipped_surrogate(ratio, advantage, eps);
    match dual {
        Some(c) if advantage < 0.0 => s.max(c * advantage),
        _ => s,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Losses of a minibatch and the gradient of the total loss.
pub fn ppo_losses(net: &FusionNet, batch: &[&Sample], cfg: &PpoConfig) -> Result<(LossStats, Vec<f64>)> {
    let (st, g) = losses_impl(net, batch, cfg, true)?;
    Ok((st, g.expect("gradient requested")))
}

/// Losses without the backward pass.
pub fn ppo_loss_values(net: &FusionNet, batch: &[&Sample], cfg: &PpoConfig) -> Result<LossStats> {
    Ok(losses_impl(net, batch, cfg, false)?.0)
}

fn losses_impl(net: &FusionNet, batch: &[&Sample], cfg: &PpoConfig, with_grad: bool) -> Result<(LossStats, Option<Vec<f64>>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let obs: Vec<&Observation> = batch.iter().map(|s| s.obs.as_ref()).collect();
    let (out, cache) = net.forward(&obs)?;
    let ls = out.log_std;
    let inv_var = [(-2.0 * ls[0]).exp(), (-2.0 * ls[1]).exp()];
    let nf = n as f64;
    let mut d_mean = vec![0.0; 2 * n];
    let mut d_value = vec![0.0; n];
    let mut d_log_std = [0.0; 2];
    let mut st = LossStats::default();
    for (i, s) in batch.iter().enumerate() {
        let mean = [out.mean[2 * i], out.mean[2 * i + 1]];
        let lp = log_prob(s.action, mean, ls);
        let log_ratio = lp - s.old_log_prob;
        let ratio = log_ratio.exp();
        let a = s.advantage;
        st.actor_loss -= dual_clipped_surrogate(ratio, a, cfg.clip_eps, cfg.dual_clip) / nf;
        st.approx_kl += ((ratio - 1.0) - log_ratio) / nf;
        // The unclipped branch is active unless the clip binds in the
        // direction that caps the objective.
        let clipped = (a > 0.0 && ratio > 1.0 + cfg.clip_eps)
            || (a < 0.0 && ratio < 1.0 - cfg.clip_eps)
            || (a < 0.0 && cfg.dual_clip.is_some_and(|c| ratio > c));
        if clipped {
            st.clip_fraction += 1.0 / nf;
        } else {
            // d(-r A / n) / d lp = -r A / n.
            let g = -ratio * a / nf;
            for j in 0..2 {
                let diff = s.action[j] - mean[j];
                d_mean[2 * i + j] += g * diff * inv_var[j];
                d_log_std[j] += g * (diff * diff * inv_var[j] - 1.0);
            }
        }
        let err = out.value[i] - s.ret;
        st.critic_loss += err * err / nf;
        d_value[i] = cfg.value_coef * 2.0 * err / nf;
    }
    st.entropy = entropy(ls);
    for g in &mut d_log_std {
        *g -= cfg.entropy_coef;
    }
    st.total = st.actor_loss + cfg.value_coef * st.critic_loss - cfg.entropy_coef * st.entropy;
    if !st.total.is_finite() {
        return Err(Error::NonFinite("ppo loss"));
    }
    let grad = with_grad.then(|| net.backward(&cache, &d_mean, d_log_std, &d_value));
    Ok((st, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, eps: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr * bc2.sqrt() / bc1;
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= step * *m / (v.sqrt() + self.eps * bc2.sqrt());
        }
    }
}

/// Scales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad {
            *g *= s;
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: u64,
}

/// Epochs of shuffled minibatch steps. Old log-probs in `samples` stay
/// frozen for the whole call.
pub fn update<R: Rng + ?Sized>(net: &mut FusionNet, adam: &mut Adam, samples: &[Sample], cfg: &PpoConfig, rng: &mut R) -> Result<UpdateMetrics> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("update needs at least one sample".into()));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    let mut m = UpdateMetrics::default();
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (st, mut grad) = ppo_losses(net, &batch, cfg)?;
            if st.critic_loss > cfg.max_critic_loss {
                return Err(Error::Divergence(format!("critic loss {:.3e} exceeds {:.1e}", st.critic_loss, cfg.max_critic_loss)));
            }
            let norm = clip_grad_norm(&mut grad, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
            adam.step(&mut net.params, &grad);
            m.actor_loss += st.actor_loss;
            m.critic_loss += st.critic_loss;
            m.entropy += st.entropy;
            m.approx_kl += st.approx_kl;
            m.clip_fraction += st.clip_fraction;
            m.grad_norm += norm;
            m.minibatches += 1;
        }
    }
    let k = m.minibatches as f64;
    m.actor_loss /= k;
    m.critic_loss /= k;
    m.entropy /= k;
    m.approx_kl /= k;
    m.clip_fraction /= k;
    m.grad_norm /= k;
    if net.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence("non-finite parameters after update".into()));
    }
    Ok(m)
}
