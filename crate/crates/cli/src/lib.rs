//! Experiment harness for clustered-MDP policy learning: configuration,
//! single experiments, seeded replication sweeps, and SVG regret plots.
//!
//! The library side exists so integration tests and other tools can drive
//! sweeps in-process; the `gfqi` binary is a thin argument parser over it.

pub mod config;
pub mod experiment;
pub mod plot;
pub mod sweep;
