//! Online meta model-based reinforcement learning.
//!
//! The numeric core (`scalar`, `tabular`, `dynmodel`, `planner`, `analysis`) is
//! generic over a [`Scalar`] so the same code runs in `f64`, `f32` and in
//! forward-mode dual numbers for second-order meta-gradients.

pub mod analysis;
pub mod checks;
pub mod config;
pub mod drivesim;
pub mod dynmodel;
pub mod error;
pub mod online;
pub mod planner;
pub mod scalar;
pub mod tabular;

pub use error::{Error, Result};
pub use scalar::{Dual, Scalar};

pub type Mdp = tabular::TabularMdp<f64>;
pub type Policy = tabular::TabularPolicy<f64>;
