//! Desk-scale 4D cone-beam CT: phantom simulation, gated reconstruction,
//! streak analysis and the RSTAR4D separable 4D convolution network.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod recon;
pub mod respiration;
pub mod rsa;
pub mod scanner;
pub mod volume;

pub use error::{Error, Result};
