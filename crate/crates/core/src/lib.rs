//! Multi-object navigation on procedural grid worlds: environments, episode
//! simulation, egocentric maps and auxiliary labels, recurrent agents trained
//! with PPO, and navigation metrics.

pub mod config;
pub mod dataset;
pub mod env;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod policy;
pub mod ppo;
pub mod replay;
pub mod scripted;
pub mod simulator;
pub mod spatial;
pub mod train;
pub mod verify;
pub mod world;

pub use error::{Error, Result};
