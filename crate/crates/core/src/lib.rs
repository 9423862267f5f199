//! Self-adaptive auto-scaling with genetic-programming scaling formulas.
//!
//! Scaling formulas ([`expr`]) are evolved by [`planner`] against an
//! offline-trained SLO predictor ([`surrogate`]) and applied by the control
//! loop in [`controller`] to a discrete-event cluster model
//! ([`simcluster`]). [`baselines`] holds the comparison scalers and
//! [`stats`] the evaluation statistics.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod controller;
pub mod error;
pub mod expr;
pub mod planner;
pub mod simcluster;
pub mod stats;
pub mod surrogate;

pub use error::{Error, Result};
