//! Simulation lab for multi-user distributed computing with random-feature
//! encoders and ridge decoders.

pub mod error;
pub mod rng;
pub mod topology;
pub mod kernels;
pub mod tasks;
pub mod encoder;
pub mod decoder;
pub mod risk_bounds;
pub mod quad;
pub mod spectral_mp;
pub mod pipeline;
pub mod harness;

pub use error::{Error, Result};
