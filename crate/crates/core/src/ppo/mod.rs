//! From-scratch PPO: fusion actor-critic, Gaussian policy, GAE, clipped
//! surrogate update and the training loop.

pub mod gae;
pub mod gradcheck;
pub mod network;
pub mod policy;
pub mod train;
pub mod update;

pub use gae::{compute_gae, normalize};
pub use gradcheck::{gradcheck, relative_error, GradcheckReport};
pub use network::{FrozenNet, FusionNet, Layout, NetConfig, Precision, PolicyOutput, LOG_STD_MAX, LOG_STD_MIN};
pub use policy::{clip_action, entropy, log_prob, sample_action, select_action};
pub use train::{write_log_csv, Checkpoint, EnvStep, Environment, LogRow, RolloutStats, Trainer, LOG_HEADER};
pub use update::{clipped_surrogate, dual_clipped_surrogate, ppo_loss_values, ppo_losses, update, Adam, LossStats, PpoConfig, Sample, UpdateMetrics};
