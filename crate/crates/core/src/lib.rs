//! Categorical restructuring analysis between consecutive MLP layers.

pub mod clustering;
pub mod dataset;
pub mod error;
pub mod extraction;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
