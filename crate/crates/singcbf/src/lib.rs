//! Std companion to `singcbf-core`: TOML configuration, CSV and model files,
//! the experiment pipeline, the parallel (γ, δ) sweep and SVG plots.

pub mod config;
pub mod formats;
pub mod pipeline;
pub mod plot;
pub mod sweep;

pub use config::{ConfigError, RunConfig};
pub use pipeline::{Check, CorruptedHessian, Stack, TuneReport};
pub use sweep::{SweepCell, SweepGrid};
