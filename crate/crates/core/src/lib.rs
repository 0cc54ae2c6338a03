//! Likelihood-free inference for black-box stochastic simulators.

pub mod alfi;
pub mod baselines;
pub mod bench;
pub mod dist;
pub mod error;
pub mod nn;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
