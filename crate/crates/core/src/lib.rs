//! Voltage-stability toolkit: AC power flow and continuation power flow for
//! data generation, synthetic PMU phasor streams, a from-scratch variational
//! autoencoder, and the latent-feature monitoring index built on top of it.

pub mod checkpoint;
pub mod cpflow;
pub mod error;
pub mod grid;
pub mod pipeline;
pub mod pmu;
pub mod powerflow;
pub mod stability;
pub mod vae;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
