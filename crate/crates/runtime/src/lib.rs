//! Running opaque algorithm containers.
//!
//! [`ContainerEngine`] has two implementations: [`HttpEngine`], which talks to a
//! local engine daemon, and [`MockEngine`], which scripts container behavior from
//! a JSON table for tests.

pub mod engine;
pub mod http;
pub mod job;
pub mod mock;

pub use engine::{BackendKind, ContainerConfig, ContainerEngine, Mount, WaitOutcome, JOB_LABEL, OWNER_LABEL};
pub use http::{Endpoint, HttpEngine, ENDPOINT_ENV};
pub use job::{default_owner, log_excerpt, pull_image, run_job, JobResult, JobSpec, JobStatus, Runtime, LOG_EXCERPT_LIMIT};
pub use mock::{BehaviorTable, Generator, ImageBehavior, MockEngine, MockEvent, OutputSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuntimeError {
    #[error("container engine unreachable: {0}")]
    EngineUnreachable(String),
    #[error("image not found: {0}")]
    ImageNotFound(String),
    #[error("digest mismatch for {image}: expected {expected}, engine has {actual:?}")]
    DigestMismatch {
        image: String,
        expected: String,
        actual: Vec<String>,
    },
    #[error("mount failure: {0}")]
    MountFailure(String),
    #[error("GPU unavailable: {0}")]
    GpuUnavailable(String),
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("engine error: {0}")]
    Engine(String),
    #[error("i/o error: {0}")]
    Io(String),
}
