//! Distributed estimation of spiked covariance eigenvalues.
//!
//! Each machine turns its local sample covariance into a bias-corrected spike
//! estimate plus a handful of nuisance estimates, ships one short message, and
//! a coordinator combines the messages with variance-aware weights.

pub mod aggregate;
pub mod error;
pub mod experiments;
pub mod ingest;
pub mod localnode;
pub mod protocol;
pub mod sampler;
pub mod seed;
pub mod spectrum;
pub mod stats;

pub use error::{Error, Result};
