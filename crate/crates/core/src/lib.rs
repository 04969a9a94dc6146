//! Simulation and analysis of hybrid controlled trials, where a randomized
//! control arm is augmented with a downweighted external (real-world) cohort.
//!
//! The crate is organised bottom-up:
//!
//! - [`survival`]: exponential survival primitives, weighted MLE and the log-rank test
//! - [`datagen`]: hybrid design derivation and the trial data-generating process
//! - [`mcmc`]: adaptive random-walk Metropolis sampler and posterior summaries
//! - [`borrowing`]: the five analysis strategies (no borrowing, test-then-pool,
//!   two-step weighting, static power prior, commensurate prior)
//! - [`metrics`]: operating characteristics aggregated over replicates
//! - [`runner`]: scenario grids, deterministic parallel replication, calibration
//! - [`planner`]: deterministic accrual and expected-event projections for design

pub mod borrowing;
pub mod datagen;
mod error;
pub mod mcmc;
pub mod metrics;
pub mod planner;
pub mod runner;
pub mod seed;
pub mod survival;

pub use error::{Error, Result};
