//! Simulator for cost-aware placement of serverless batch pipelines on a
//! resource-limited edge cluster with overflow to a pay-per-use cloud.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod driver;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod placement;
pub mod scheduler;
pub mod sim;
