//! Unpaired volumetric style harmonization with a conditional latent
//! diffusion model, plus the synthetic corpus, baselines and metrics used to
//! evaluate it.

pub mod autoenc;
pub mod baselines;
pub mod checkpoint;
pub mod cldm;
pub mod config;
mod error;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod plot;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
