//! Policy learning for clustered Markov decision processes.
//!
//! Offline datasets from clustered environments violate the independence
//! assumption behind standard fitted Q-iteration: subjects in the same
//! cluster share time-local random shocks, so their TD errors are
//! correlated. This crate implements three linear Q-learners over such
//! data —
//!
//! * [`learners::fqi_fit`]: standard fitted Q-iteration (pooled least
//!   squares, correlation-unaware),
//! * [`learners::agtd_fit`]: generalized TD adapted for policy learning
//!   (optimal per-tuple instrument, variance-weighted, still
//!   correlation-unaware),
//! * [`learners::gfqi_fit`]: generalized FQI, which solves a cluster-wise
//!   generalized estimating equation with a working intra-cluster
//!   correlation model,
//!
//! together with the supporting machinery: clustered simulators
//! ([`envs`]), state-action polynomial features ([`features`]), working
//! covariance estimation ([`gee`]), and evaluation tools ([`eval`]) —
//! Monte-Carlo policy values, a grid value-iteration oracle, regret, and
//! the plug-in sandwich covariance of the fitted coefficients.
//!
//! Everything is deterministic given a seed: randomness flows through
//! [`rng::RngStream`] values derived from (seed, label-path) pairs, so
//! replication sweeps reproduce bit-identically under any thread count.

// `!(x > 0.0)` guards reject NaN along with nonpositive values; the
// suggested `x <= 0.0` would let NaN through validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod envs;
pub mod error;
pub mod eval;
pub mod features;
pub mod gee;
pub mod learners;
pub mod policy;
pub mod reduce;
pub mod rng;

pub use data::{ClusterBlock, Dataset, ExperimentConfig, Transition};
pub use error::{Error, Result};
pub use rng::{derive_stream, RngStream};
