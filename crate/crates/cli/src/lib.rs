//! Experiment driver: configuration, the pipeline stages, run manifests
//! and the interactive negotiation session.

pub mod chat;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::{
    resolve_variant, schedule_pattern, Entries, Precision, Preset, RunConfig, VARIANTS,
};
pub use manifest::RunManifest;
pub use pipeline::{lcr, read_metrics, Data, Run};
