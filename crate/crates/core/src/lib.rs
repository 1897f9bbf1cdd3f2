//! Single-rollout batchwise baselines for policy-gradient training with
//! verifiable 0/1 rewards, together with the group and batch baselines they
//! are compared against, a synthetic bandit environment with exact prompt
//! values, estimator diagnostics, and a toy policy-gradient trainer.

pub mod calibration;
pub mod diagnostics;
pub mod env;
pub mod estimators;
pub mod offline_values;
pub mod rng;
pub mod stats;
pub mod trainer;
