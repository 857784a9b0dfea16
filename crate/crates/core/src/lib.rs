//! Guided diffusion sampling over analytic and small learned score models.

pub mod epsnet;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod metrics;
pub mod sampler;
pub mod schedule;
pub mod score_models;

pub use error::{Error, Result};
