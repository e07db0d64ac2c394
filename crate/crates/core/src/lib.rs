//! Dataset distillation by loss matching against randomly sampled models.
//!
//! Supervised linear regression distillation matches mean-squared-error losses
//! under an ensemble of Gaussian homogeneous regressors; offline RL
//! distillation matches (reward-scaled) Bellman losses under randomly sampled
//! Q-predictors. The crate also carries the baselines, lower-bound
//! constructions, classic-control environments and the Fitted-Q trainer needed
//! to run the full experiment suite.

pub mod data;
pub mod envs;
pub mod experiment;
pub mod error;
pub mod fqi;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
pub mod baselines;
pub mod linreg;
pub mod lowerbound;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rl_distill;
