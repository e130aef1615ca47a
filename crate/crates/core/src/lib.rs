//! Value-gradient iteration for convex stochastic control with quadratic
//! approximate value functions.

pub mod baselines;
pub mod cli;
pub mod conic;
pub mod error;
pub mod fitting;
pub mod iteration;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod policy;
pub mod problems;

pub use error::{Error, Result};
