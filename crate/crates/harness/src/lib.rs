//! Experiment orchestration over `dcrl-core`: dataset generation, training,
//! evaluation, the (d, seed) matrix with across-seed aggregation, and static
//! plots regenerated from stored metrics.

pub mod aggregate;
pub mod cell;
pub mod cli;
pub mod config;
pub mod error;
pub mod matrix;
pub mod plot;
pub mod record;

pub use error::{HarnessError, Result};
