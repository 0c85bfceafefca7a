//! Bayesian spatio-temporal matrix completion for causal panel inference
//! on rare count outcomes.
//!
//! The library fits low-rank factor models with spatial and temporal priors
//! to panel count data in which treated unit-times have been masked, imputes
//! the missing counterfactual counts from the posterior predictive
//! distribution, and summarizes treatment effects on the incidence-rate
//! scale. A simulation harness scores the Bayesian models against
//! frequentist matrix-completion baselines.

pub mod dist;
pub mod error;
pub mod fixtures;
pub mod graphs;
pub mod model;
pub mod panel;

pub use error::{Error, Result};
