//! Datasets, experiment drivers and exporters around the `freqsense` core.

pub mod error;
pub mod cifar;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod export;
pub mod heatmap;
pub mod stats;
pub mod synth;

pub use error::{HarnessError, Result};
