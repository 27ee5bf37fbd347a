//! Command-line pipeline around `vpcat-core`: configuration, cached stage
//! outputs, tables and heatmaps.

pub mod artifacts;
pub mod config;
pub mod heatmap;
pub mod pipeline;
pub mod tables;

pub use config::PipelineConfig;
pub use pipeline::{Outcome, Pipeline, Report, Selector};
