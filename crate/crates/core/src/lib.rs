//! Early-session energy prediction for EV charging depots, with a
//! station-level federated averaging simulator.
//!
//! Stages, in pipeline order: [`ingest`] parses session and time-series
//! logs, [`data`] filters them, [`features`] builds early-window vectors,
//! [`heterogeneity`] measures how far station-level target distributions
//! drift from the pooled one, [`federation`] trains centrally or with FedAvg,
//! and [`evaluation`] splits, scores and aggregates across seeds.

// NaN must fail validation, so comparisons are negated on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod federation;
pub mod heterogeneity;
pub mod ingest;
pub mod models;
pub mod partition;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
