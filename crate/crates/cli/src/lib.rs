//! Command-line pipeline around the `floodlens` library.

pub mod config;
pub mod pipeline;

pub use config::{Overrides, RunConfig};
pub use pipeline::{exit_code, Pipeline, Stage, StageDependency};
