//! Model-based meta reinforcement learning with graph-structured latent
//! dynamics models.

pub mod bounds;
pub mod config;
pub mod dist;
pub mod dynamics;
pub mod encoder;
pub mod envs;
pub mod error;
pub mod meta;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
