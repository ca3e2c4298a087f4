//! Training-free concept erasure by dual energy-guided latent optimization,
//! on diffusion models whose data distribution is an analytic Gaussian
//! mixture. Every score is exact, so guidance effects can be measured without
//! a learned network in the loop.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod metrics;
pub mod mixture;
pub mod runner;
pub mod sampler;
pub mod schedule;
pub mod semantics;
pub mod svg;
pub mod validate;
pub mod vector;
pub mod world;

pub use error::{Error, Result};
