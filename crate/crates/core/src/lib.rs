//! Learned cache replacement by imitating Belady's optimal policy.

pub mod baselines;
pub mod cache;
pub mod eval;
pub mod imitation;
pub mod kernel;
pub mod model;
pub mod oracle;
pub mod trace;
