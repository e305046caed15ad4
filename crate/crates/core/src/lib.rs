//! Policy-impact estimation on website traffic panels.
//!
//! The pipeline builds a synthetic control for every treated website-instance,
//! estimates a two-unit panel-differences regression against it over five
//! expanding post-enforcement windows, merges instance effects into website
//! effects, derives usage-intensity effects and aggregates cohorts.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calendar;
pub mod cohorts;
pub mod effects;
pub mod ingest;
pub mod model;
pub mod output;
pub mod pipeline;
pub mod revenue;
pub mod robustness;
pub mod simkit;
pub mod stats;
pub mod synth;
