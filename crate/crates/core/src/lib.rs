//! Two-stage channel estimation for one-bit mmWave massive MIMO receivers.
//!
//! A conditional adversarial network turns quantized pilot observations into
//! a coarse channel estimate, and a residual attention denoiser refines it,
//! in either the spatial or the DFT beamspace domain. The crate also carries
//! the synthetic channel / measurement pipeline used to train and evaluate
//! both networks.

pub mod cgan;
pub mod channel;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod measurement;
pub mod nn;
pub mod pipeline;
pub mod ridnet;
pub mod rng;

pub use error::{Error, Result};
