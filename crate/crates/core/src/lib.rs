//! Planning, evaluation and validation toolkit for the partitioned equivalence
//! test used in automatic passenger counting (APC) accuracy validation.
//!
//! A validation campaign records door opening phases (DOP), splits them into a
//! *safe* and an *unsafe* partition, manually counts every unsafe DOP and only
//! a random quota of the safe ones, and then runs an equivalence test on the
//! combined, reweighted sample.
//!
//! Module map:
//!
//! - [`domain`]: records and parameter containers
//! - [`estimator`]: leave-q-out estimators, pooled variance, confidence interval, verdict
//! - [`planner`]: sample size, recorded size and quota planning
//! - [`cost`]: cost parameters from video durations and labor rates
//! - [`classify`]: partitioning rules and the quota sampler
//! - [`simulate`]: Monte Carlo and analytic success-probability studies
//! - [`io`]: campaign/config files and report emission

// `!(x >= 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod cost;
pub mod domain;
pub mod error;
pub mod estimator;
pub mod io;
pub mod normal;
pub mod planner;
pub mod simulate;

pub use domain::{
    CostParams, CostRates, DopRecord, Label, PartitionParams, PartitionStats, TestParams,
    Violation,
};
pub use error::{Error, Result};
pub use estimator::{EvaluationReport, TestKind, Verdict};
pub use planner::{Plan, QuotaSource};
