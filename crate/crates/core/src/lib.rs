//! Simulator for federated SGD with local updates, unbiased atomic gradient
//! compression, an adaptive local-update/sparsity schedule and a simulated
//! wireless clock.

pub mod compressor;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod netsim;
pub mod nn;
pub mod rng;
pub mod scheduler;
pub mod selftest;
pub mod tensor;

pub use error::{FflError, Result};
