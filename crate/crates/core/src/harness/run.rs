//! Training runs with on-disk outputs, and the branch ablation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{EnvShared, LaneEnv};
use crate::error::{Error, Result};
use crate::fusion::BranchMask;
use crate::sim::TrackSpec;
use crate::ppo::{write_log_csv, Checkpoint, RolloutStats, Trainer, UpdateMetrics};

use super::config::RunConfig;
use super::eval::{evaluate, EvalSummary};
use super::metrics::median;

pub const TRAINING_LOG: &str = "training_log.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const METRICS: &str = "metrics.csv";
pub const ABLATION: &str = "ablation.csv";
pub const ROLLOUT: &str = "rollout.jsonl";

/// Training environment on `pool`, or on the generated pool when `None`.
pub fn build_env(cfg: &RunConfig, pool: Option<Vec<TrackSpec>>) -> Result<LaneEnv> {
    let env_cfg = cfg.env_config();
    let pool = pool.unwrap_or_else(|| env_cfg.sim.generate_pool());
    Ok(LaneEnv::new(Arc::new(EnvShared::new(env_cfg, pool)?), cfg.seed))
}

pub fn new_trainer(cfg: &RunConfig, pool: Option<Vec<TrackSpec>>) -> Result<Trainer<LaneEnv>> {
    cfg.validate()?;
    Trainer::new(build_env(cfg, pool)?, cfg.net_config(), cfg.ppo_config())
}

/// Restores a run; the configuration stored in the checkpoint wins. A
/// custom track pool must be supplied again.
pub fn resume_trainer(ck: Checkpoint, pool: Option<Vec<TrackSpec>>) -> Result<(RunConfig, Trainer<LaneEnv>)> {
    let cfg: RunConfig = serde_json::from_value(ck.run_config.clone()).map_err(|e| Error::Checkpoint(format!("run configuration: {e}")))?;
    cfg.validate()?;
    if ck.net_config() != cfg.net_config() {
        return Err(Error::Checkpoint("network shape differs from the stored configuration".into()));
    }
    let env = build_env(&cfg, pool)?;
    Ok((cfg, Trainer::from_checkpoint(env, ck)?))
}

fn write_outputs(tr: &Trainer<LaneEnv>, cfg: &RunConfig, dir: &Path) -> Result<()> {
    let mut log = BufWriter::new(File::create(dir.join(TRAINING_LOG))?);
    write_log_csv(&mut log, &tr.log)?;
    log.flush()?;
    tr.write_checkpoint(&dir.join(CHECKPOINT), stored_config(cfg)?)
}

/// The configuration embedded in checkpoints. The output directory is
/// blanked so identical runs in different places produce identical files.
pub fn stored_config(cfg: &RunConfig) -> Result<serde_json::Value> {
    let mut c = cfg.clone();
    c.output_dir = Default::default();
    Ok(serde_json::to_value(c)?)
}

/// Trains to the configured step budget, rewriting the log and the
/// checkpoint in `cfg.output_dir` after every update.
pub fn train_run(
    cfg: &RunConfig,
    mut tr: Trainer<LaneEnv>,
    mut on_update: impl FnMut(&Trainer<LaneEnv>, &UpdateMetrics, &RolloutStats) -> Result<()>,
) -> Result<Trainer<LaneEnv>> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    tr.train(|tr, m, s| {
        write_outputs(tr, cfg, &dir)?;
        on_update(tr, m, s)
    })?;
    write_outputs(&tr, cfg, &dir)?;
    Ok(tr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSemantic,
    NoPid,
    NoSemanticNoPid,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoSemantic, Variant::NoPid, Variant::NoSemanticNoPid];

    pub fn mask(self) -> BranchMask {
        match self {
            Variant::Full => BranchMask { semantic: true, pid: true },
            Variant::NoSemantic => BranchMask { semantic: false, pid: true },
            Variant::NoPid => BranchMask { semantic: true, pid: false },
            Variant::NoSemanticNoPid => BranchMask { semantic: false, pid: false },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSemantic => "no_semantic",
            Variant::NoPid => "no_pid",
            Variant::NoSemanticNoPid => "no_semantic_no_pid",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    /// `None` when training aborted.
    pub summary: Option<EvalSummary>,
    pub final_return: f64,
}

/// Configuration of one ablation run; outputs go to `<output_dir>/<variant>/seed_<seed>`.
pub fn variant_config(base: &RunConfig, variant: Variant, seed: u64) -> RunConfig {
    let mut c = base.clone();
    c.mask = variant.mask();
    c.seed = seed;
    c.output_dir = base.output_dir.join(variant.name()).join(format!("seed_{seed}"));
    c
}

/// Trains and evaluates one variant. Divergence yields a row without a
/// summary instead of an error.
pub fn ablation_run(
    base: &RunConfig,
    variant: Variant,
    seed: u64,
    on_update: impl FnMut(&Trainer<LaneEnv>, &UpdateMetrics, &RolloutStats) -> Result<()>,
) -> Result<AblationRow> {
    let cfg = variant_config(base, variant, seed);
    match train_run(&cfg, new_trainer(&cfg, None)?, on_update) {
        Ok(tr) => {
            let (_, summary) = evaluate(&tr.net, &cfg.env_config(), &cfg.eval, Some(&tr.env.state.normalizer))?;
            Ok(AblationRow { variant, seed, summary: Some(summary), final_return: tr.log.last().map_or(f64::NAN, |r| r.mean_return) })
        }
        Err(Error::Divergence(_)) => Ok(AblationRow { variant, seed, summary: None, final_return: f64::NAN }),
        Err(e) => Err(e),
    }
}

/// Every variant on every seed; writes `ablation.csv` in the base output
/// directory.
pub fn run_ablation(base: &RunConfig, variants: &[Variant], seeds: &[u64], mut on_run: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let row = ablation_run(base, variant, seed, |_, _, _| Ok(()))?;
            on_run(&row);
            rows.push(row);
        }
    }
    std::fs::create_dir_all(&base.output_dir)?;
    let mut out = BufWriter::new(File::create(base.output_dir.join(ABLATION))?);
    write_ablation_csv(&mut out, &rows)?;
    out.flush()?;
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "variant,seed,diverged,rmse_m,std_m,nrmse,trial_mean_rmse_m,median_trial_rmse_m,mean_return,failures";

pub fn write_ablation_csv<W: Write>(out: &mut W, rows: &[AblationRow]) -> Result<()> {
    writeln!(out, "{ABLATION_HEADER}")?;
    for r in rows {
        match &r.summary {
            Some(s) => writeln!(
                out,
                "{},{},false,{},{},{},{},{},{},{}",
                r.variant.name(),
                r.seed,
                s.pooled.rmse,
                s.pooled.std,
                s.pooled.nrmse,
                s.trial_mean.rmse,
                s.median_rmse,
                s.mean_return,
                s.failures
            )?,
            None => writeln!(out, "{},{},true,,,,,,,", r.variant.name(), r.seed)?,
        }
    }
    Ok(())
}

/// Median pooled RMSE per variant; a diverged run counts as infinite error.
pub fn median_rmse(rows: &[AblationRow], variant: Variant) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| r.summary.as_ref().map_or(f64::INFINITY, |s| s.pooled.rmse))
        .collect();
    median(&v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("half".parse::<Variant>().is_err());
    }

    #[test]
    fn masks_match_names() {
        assert_eq!(Variant::NoPid.mask(), BranchMask { semantic: true, pid: false });
        assert_eq!(Variant::NoSemanticNoPid.mask(), BranchMask { semantic: false, pid: false });
    }

    #[test]
    fn diverged_runs_rank_last() {
        let rows = vec![
            AblationRow { variant: Variant::Full, seed: 0, summary: None, final_return: f64::NAN },
            AblationRow { variant: Variant::Full, seed: 1, summary: None, final_return: f64::NAN },
        ];
        assert_eq!(median_rmse(&rows, Variant::Full), Some(f64::INFINITY));
        assert_eq!(median_rmse(&rows, Variant::NoPid), None);
        let mut buf = Vec::new();
        write_ablation_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().starts_with("full,0,true"));
    }
}
