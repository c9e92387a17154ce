//! Passive actor-critic (pAC) for linearly-solvable MDPs.
//!
//! Learns a controller from passive transitions `(x_k, x_{k+1}, q_k)` plus a
//! known input gain `B`, without knowing the noise level.

pub mod actor;
pub mod approx;
pub mod baselines;
pub mod critic;
pub mod domains;
pub mod error;
pub mod harness;
pub mod ingest;
pub mod lmdp;
pub mod policy;
pub mod registry;

pub use error::{Error, Result};
