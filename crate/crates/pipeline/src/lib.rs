//! End-to-end orchestration: validate a subject, run the selected algorithm
//! containers, fuse their masks and publish a hashed output bundle.

pub mod cli;
mod config;
mod error;
pub mod manifest;
mod pipeline;

pub use config::{load_catalog, EngineBackend, PipelineConfig, CATALOG_OVERRIDE_ENV};
pub use error::{JobFailure, PipelineError};
pub use manifest::Manifest;
pub use pipeline::{OutputBundle, Pipeline, CONSENSUS_FILE, FUSION_FILE, IDENTITY_METHOD, METRICS_FILE};
