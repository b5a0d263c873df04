//! Multimodal next-N-year flood occurrence prediction on a 1°×1° grid.
//!
//! Yearly disaster statistics per grid cell are fused with a text embedding
//! of the cell's geography description and fed to a gradient-boosted tree
//! classifier. See the workspace README for the pipeline overview.

pub mod dataset;
pub mod error;
pub mod evalmetrics;
pub mod featstat;
pub mod geogrid;
pub mod ingest;
pub mod model;
pub mod synth;
pub mod textcorpus;
pub mod textembed;

pub use error::{Error, Result};
