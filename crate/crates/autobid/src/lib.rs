//! Iterative offline reinforcement learning for budget-constrained
//! auto-bidding, desk scale and fully reproducible.
//!
//! The crate provides a simulated multi-advertiser second-price auction
//! environment, trajectory-wise exploration (parameter-space noise) and
//! exploitation (robust trajectory weighting), provably safe exploration by
//! adaptive action selection, an IQL-style conservative offline trainer, and
//! exact small-MDP oracles that verify the safety and dominance claims with
//! no sampling error.

pub mod config;
pub mod data;
pub mod env;
pub mod iql;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod rollout;
pub mod seas;
pub mod tabular;
pub mod weighting;
