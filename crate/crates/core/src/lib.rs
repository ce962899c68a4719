//! Guided diffusion for generating safety-critical driving scenarios.

pub mod ablation;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod dynamics;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod simulate;
pub mod world;

pub use error::{Error, Result};
