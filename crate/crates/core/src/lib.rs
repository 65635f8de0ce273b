//! Differentially private SGD with per-sample adaptive clipping, decaying
//! noise and clipping-threshold schedules, truncated-CDP accounting and
//! group fairness metrics.

// negated float comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod cli;
pub mod clipping;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod schedules;
pub mod trainer;

pub use error::{Error, Result};
