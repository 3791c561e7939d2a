//! The multi-trial evaluation protocol.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, EnvShared, EnvState, LaneEnv};
use crate::error::{Error, Result};
use crate::fusion::{Observation, SemanticNormalizer, Transition};
use crate::ppo::{clip_action, select_action, Checkpoint, FrozenNet, FusionNet};
use crate::reward::{m_to_px, TerminationCause};
use crate::sim::generate_track_with;

use super::config::EvalConfig;
use super::metrics::{median, metrics_m, Metrics};

/// Who chooses the actions during an evaluation episode.
#[derive(Clone, Copy)]
pub enum Driver<'a> {
    /// Deterministic policy mean.
    Policy(&'a FrozenNet<'a>),
    /// Steering from the PID feature at the default target speed.
    Pid,
    /// Uniform actions in `[-1, 1]^2`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub trial_id: usize,
    pub seed: u64,
    /// Ground-truth offsets, px (+ right).
    pub offsets_px: Vec<f64>,
    pub offsets_m: Vec<f64>,
    pub rmse: f64,
    pub std: f64,
    pub nrmse: f64,
    pub length: usize,
    pub episode_return: f64,
    pub termination_cause: TerminationCause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_trials: usize,
    /// Over all steps of all trials.
    pub pooled: Metrics,
    /// Averages of the per-trial values.
    pub trial_mean: Metrics,
    pub median_rmse: f64,
    pub mean_return: f64,
    pub mean_length: f64,
    pub failures: usize,
}

/// The semantic standardizer reached during training.
pub fn normalizer_from_checkpoint(ck: &Checkpoint) -> Result<SemanticNormalizer> {
    let st: EnvState = serde_json::from_value(ck.env_state().clone()).map_err(|e| Error::Checkpoint(format!("environment state: {e}")))?;
    Ok(st.normalizer)
}

/// Single-track environment for trial `trial`.
pub fn trial_env(cfg: &EnvConfig, eval: &EvalConfig, trial: usize, normalizer: Option<&SemanticNormalizer>) -> Result<LaneEnv> {
    let seed = eval.seed_base + trial as u64;
    let track = generate_track_with(seed, eval.profile, &cfg.sim.track);
    let mut env = LaneEnv::new(Arc::new(EnvShared::new(cfg.clone(), vec![track])?), seed);
    if let Some(n) = normalizer {
        if n.mean.len() != cfg.semantics.encoder.d {
            return Err(Error::Checkpoint("semantic normalizer does not match semantics.encoder.d".into()));
        }
        env.state.normalizer = n.clone();
    }
    Ok(env)
}

fn act(driver: Driver<'_>, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
    Ok(match driver {
        Driver::Policy(net) => {
            let (mean, log_std, _) = net.forward_one(obs)?;
            clip_action(select_action(mean, log_std, true, rng).0)
        }
        Driver::Pid => crate::env::pid_driver_action(obs),
        Driver::Random => [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
    })
}

/// Runs one episode; offsets are sampled after every simulator step.
pub fn run_trial(cfg: &EnvConfig, eval: &EvalConfig, trial: usize, driver: Driver<'_>, normalizer: Option<&SemanticNormalizer>) -> Result<EvalRecord> {
    let mut env = trial_env(cfg, eval, trial, normalizer)?;
    let seed = env.state.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c);
    let mut obs = env.reset()?;
    let mut offsets_m = Vec::new();
    let mut ret = 0.0;
    let cause = loop {
        let a = act(driver, &obs, &mut rng)?;
        let st = env.step(a[0], a[1])?;
        offsets_m.push(st.info.dx_m);
        ret += st.reward;
        if st.done() {
            break st.info.breakdown.cause;
        }
        obs = st.obs;
    };
    let m = metrics_m(&offsets_m)?;
    Ok(EvalRecord {
        trial_id: trial,
        seed,
        offsets_px: offsets_m.iter().map(|&d| m_to_px(d)).collect(),
        length: offsets_m.len(),
        offsets_m,
        rmse: m.rmse,
        std: m.std,
        nrmse: m.nrmse,
        episode_return: ret,
        termination_cause: cause,
    })
}

pub fn summarize(records: &[EvalRecord]) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no evaluation records".into()));
    }
    let all: Vec<f64> = records.iter().flat_map(|r| r.offsets_m.iter().copied()).collect();
    let n = records.len() as f64;
    let mean = |f: fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let rmses: Vec<f64> = records.iter().map(|r| r.rmse).collect();
    Ok(EvalSummary {
        n_trials: records.len(),
        pooled: metrics_m(&all)?,
        trial_mean: Metrics { rmse: mean(|r| r.rmse), std: mean(|r| r.std), nrmse: mean(|r| r.nrmse) },
        median_rmse: median(&rmses).unwrap_or(f64::NAN),
        mean_return: mean(|r| r.episode_return),
        mean_length: mean(|r| r.length as f64),
        failures: records.iter().filter(|r| matches!(r.termination_cause, TerminationCause::OffRoad | TerminationCause::Obstacle)).count(),
    })
}

/// Trials `0..n_trials` in order with the given driver.
pub fn evaluate_driver(cfg: &EnvConfig, eval: &EvalConfig, n_trials: usize, driver: Driver<'_>, normalizer: Option<&SemanticNormalizer>) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    let records = (0..n_trials).map(|i| run_trial(cfg, eval, i, driver, normalizer)).collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records)?;
    Ok((records, summary))
}

/// The deterministic policy over `eval.n_trials` trials.
pub fn evaluate(net: &FusionNet, cfg: &EnvConfig, eval: &EvalConfig, normalizer: Option<&SemanticNormalizer>) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    let frozen = net.frozen();
    evaluate_driver(cfg, eval, eval.n_trials, Driver::Policy(&frozen), normalizer)
}

/// Drives `env` for `steps` steps, starting new episodes as needed. Without
/// a policy the PID driver acts and log-probs and values are zero.
pub fn record_rollout(env: &mut LaneEnv, policy: Option<&FrozenNet<'_>>, steps: usize) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(steps);
    let mut obs = env.reset()?;
    let mut rng = ChaCha8Rng::seed_from_u64(env.state.seed);
    for _ in 0..steps {
        let (action, log_prob, value) = match policy {
            Some(net) => {
                let (mean, log_std, value) = net.forward_one(&obs)?;
                let (a, lp) = select_action(mean, log_std, true, &mut rng);
                (a, lp, value)
            }
            None => (crate::env::pid_driver_action(&obs), 0.0, 0.0),
        };
        let scene_before = env.state.scene;
        let st = env.step(action[0], action[1])?;
        let done = st.done();
        out.push(Transition {
            obs: Arc::clone(&obs),
            action,
            reward: st.reward,
            next_obs: Arc::clone(&st.obs),
            done,
            log_prob,
            value,
            scene: scene_before.map(|s| (s, st.info.scene)),
        });
        obs = if done { env.reset()? } else { st.obs };
    }
    Ok(out)
}

/// Mean return of the uniform random policy over `eval.random_episodes` trials.
pub fn random_policy_return(cfg: &EnvConfig, eval: &EvalConfig) -> Result<f64> {
    Ok(evaluate_driver(cfg, eval, eval.random_episodes.max(1), Driver::Random, None)?.1.mean_return)
}

pub const METRICS_HEADER: &str = "trial,seed,steps,return,rmse_m,std_m,nrmse,termination";

fn cause_name(c: TerminationCause) -> &'static str {
    match c {
        TerminationCause::None => "none",
        TerminationCause::OffRoad => "off_road",
        TerminationCause::Obstacle => "obstacle",
        TerminationCause::MaxSteps => "max_steps",
    }
}

/// One row per trial, then `pooled` and `trial_mean` summary rows.
pub fn write_metrics_csv<W: Write>(out: &mut W, records: &[EvalRecord], s: &EvalSummary) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{},{},{},{},{},{},{},{}", r.trial_id, r.seed, r.length, r.episode_return, r.rmse, r.std, r.nrmse, cause_name(r.termination_cause))?;
    }
    let total: usize = records.iter().map(|r| r.length).sum();
    writeln!(out, "pooled,,{},{},{},{},{},", total, s.mean_return, s.pooled.rmse, s.pooled.std, s.pooled.nrmse)?;
    writeln!(out, "trial_mean,,{},{},{},{},{},", s.mean_length, s.mean_return, s.trial_mean.rmse, s.trial_mean.std, s.trial_mean.nrmse)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::OffsetMode;
    use crate::sim::TrackProfile;

    fn quick() -> (EnvConfig, EvalConfig) {
        let mut c = EnvConfig::default();
        c.reward.max_steps = 60;
        (c, EvalConfig { n_trials: 3, ..EvalConfig::default() })
    }

    #[test]
    fn records_are_consistent() {
        let (c, e) = quick();
        let (recs, s) = evaluate_driver(&c, &e, 3, Driver::Pid, None).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert_eq!(r.offsets_px.len(), r.length);
            assert!((r.nrmse - r.rmse / 5.0).abs() < 1e-15);
            for (y, d) in r.offsets_px.iter().zip(&r.offsets_m) {
                assert!((y * (5.0 / 235.0) - d).abs() < 1e-12);
            }
        }
        let seeds: std::collections::BTreeSet<u64> = recs.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 3);
        assert!((s.pooled.nrmse - s.pooled.rmse / 5.0).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_summary() {
        let (c, e) = quick();
        let net = FusionNet::new(crate::ppo::NetConfig::default(), 3).unwrap();
        let a = evaluate(&net, &c, &e, None).unwrap();
        let b = evaluate(&net, &c, &e, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pid_oracle_holds_the_centerline_on_straight_tracks() {
        let mut c = EnvConfig::default();
        c.perception.mode = OffsetMode::GroundTruth;
        let e = EvalConfig { n_trials: 5, profile: TrackProfile::Straight, ..EvalConfig::default() };
        let (_, s) = evaluate_driver(&c, &e, 5, Driver::Pid, None).unwrap();
        assert_eq!(s.failures, 0);
        assert!(s.pooled.rmse < 0.05, "pooled rmse {}", s.pooled.rmse);
    }

    #[test]
    fn rollout_crosses_episodes() {
        let (c, _) = quick();
        let mut env = LaneEnv::from_config(c, 4).unwrap();
        let t = record_rollout(&mut env, None, 130).unwrap();
        assert_eq!(t.len(), 130);
        assert!(t.iter().filter(|t| t.done).count() >= 2);
        assert!(t.iter().all(|t| t.scene.is_some()));
    }

    #[test]
    fn metrics_csv_has_header_and_summary_rows() {
        let (c, e) = quick();
        let (recs, s) = evaluate_driver(&c, &e, 2, Driver::Random, None).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &recs, &s).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 1 + 2 + 2);
        assert!(lines[3].starts_with("pooled,"));
    }
}
