//! Bayesian conditional autoregressive quantile and expectile risk models.

pub mod backtest;
pub mod carm;
pub mod data;
pub mod error;
pub mod nic;
pub mod pipeline;
pub mod risk;
pub mod sampler;
pub mod sep;
pub mod stats;

#[cfg(test)]
#[allow(dead_code)]
mod oracle;

pub use error::{Error, Result};
