//! Lane-keeping with multimodal observation fusion and PPO.

pub mod error;
pub mod fusion;
pub mod harness;
pub mod control;
pub mod env;
pub mod geom;
pub mod linalg;
pub mod perception;
pub mod ppo;
pub mod reward;
pub mod semantics;
pub mod sim;

pub use error::{Error, Result};
