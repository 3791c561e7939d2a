//! Metrics, the evaluation protocol, run configuration and ablations.

pub mod config;
pub mod eval;
pub mod metrics;
pub mod run;

pub use config::{EvalConfig, NetworkSection, RunConfig};
pub use eval::{evaluate, evaluate_driver, normalizer_from_checkpoint, random_policy_return, record_rollout, run_trial, summarize, trial_env, write_metrics_csv, Driver, EvalRecord, EvalSummary, METRICS_HEADER};
pub use metrics::{compute_metrics, median, metrics_m, px_offsets_to_m, Metrics, LANE_WIDTH_M};
pub use run::{ablation_run, build_env, median_rmse, stored_config, new_trainer, resume_trainer, run_ablation, train_run, variant_config, write_ablation_csv, AblationRow, Variant, ABLATION, ABLATION_HEADER, CHECKPOINT, METRICS, ROLLOUT, TRAINING_LOG};
