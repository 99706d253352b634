//! Hierarchical marginal-price markets for aggregated distributed energy
//! resources: clearing at every level with dual-variable prices, settlement,
//! profit allocation benchmarks and executable incentive checks.

pub mod allocation;
pub mod analysis;
pub mod clearing;
pub mod config;
pub mod error;
pub mod lp;
pub mod model;
pub mod scenario;
pub mod settlement;

pub use error::{Error, Result};
