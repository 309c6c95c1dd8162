//! Measuring how much small image classifiers rely on shape rather than
//! intensity, using brightness-negated images as the probe.

pub mod datasets;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod report;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
