//! Variance-reduced minibatch scheduling for domain-discrepancy losses.
//!
//! The pipeline has three stages. [`stratify`] partitions each domain's
//! features into size-constrained strata with a kernelized k-means.
//! [`schedule`] draws one index per stratum per minibatch and greedily
//! reorders the draws so that every minibatch's stochastic discrepancy sits
//! close to the full-data reference value. [`discrepancy`] provides the
//! reference and weighted stochastic estimators (MMD and correlation
//! alignment) that the scheduler targets. [`simulate`] wraps the pipeline in
//! Monte Carlo sweeps that measure estimator variance per sampling scheme,
//! and [`io`] reads and writes the feature-file formats shared with the CLI.

pub mod discrepancy;
pub mod error;
pub mod io;
pub mod kernel;
pub mod schedule;
pub mod seed;
pub mod simulate;
pub mod stratify;
pub mod types;

mod parallel;
mod util;

pub use error::{Error, Result};
