use std::path::PathBuf;

use orch_core::fusion::FusionError;
use orch_core::geometry::GeometryError;
use orch_core::metrics::MetricsError;
use orch_core::nifti::NiftiError;
use orch_core::registry::RegistryError;
use orch_core::validation::{ValidationError, ValidationReport};
use orch_runtime::RuntimeError;
use serde::Serialize;

/// Why one algorithm contributed no candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobFailure {
    pub algorithm_id: String,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("input validation failed for {}: {}", .0.subject_id, summarize(.0))]
    ValidationFailed(Box<ValidationReport>),
    #[error("all {} algorithm jobs failed: {}", .0.len(), .0.iter().map(|f| format!("{} ({})", f.algorithm_id, f.reason)).collect::<Vec<_>>().join("; "))]
    AllJobsFailed(Vec<JobFailure>),
    #[error("container engine unreachable: {0}")]
    EngineUnreachable(String),
    #[error("output bundle {} already exists; pass --force to replace it", .0.display())]
    OutputCollision(PathBuf),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Runtime(RuntimeError),
    #[error(transparent)]
    Discovery(#[from] ValidationError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn summarize(r: &ValidationReport) -> String {
    r.errors().map(|f| f.message.clone()).collect::<Vec<_>>().join("; ")
}

impl From<RuntimeError> for PipelineError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::EngineUnreachable(m) => PipelineError::EngineUnreachable(m),
            other => PipelineError::Runtime(other),
        }
    }
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> PipelineError {
        let path = path.into();
        move |source| PipelineError::Io { path, source }
    }

    /// Process exit status: 1 validation, 2 usage, 3 engine or runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ValidationFailed(_) => 1,
            PipelineError::OutputCollision(_)
            | PipelineError::InvalidConfig(_)
            | PipelineError::Discovery(_)
            | PipelineError::Registry(
                RegistryError::UnknownTask(_) | RegistryError::UnknownAlgorithm(_) | RegistryError::NoAlgorithmForTask(_),
            ) => 2,
            _ => 3,
        }
    }

    /// Stable name used in the JSON summary.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::ValidationFailed(_) => "ValidationFailed",
            PipelineError::AllJobsFailed(_) => "AllJobsFailed",
            PipelineError::EngineUnreachable(_) => "EngineUnreachable",
            PipelineError::OutputCollision(_) => "OutputCollision",
            PipelineError::InvalidConfig(_) => "InvalidConfig",
            PipelineError::Registry(_) => "RegistryError",
            PipelineError::Runtime(_) => "RuntimeError",
            PipelineError::Discovery(_) => "InputDiscoveryError",
            PipelineError::Nifti(_) => "NiftiError",
            PipelineError::Geometry(_) => "GeometryError",
            PipelineError::Fusion(_) => "FusionError",
            PipelineError::Metrics(_) => "MetricsError",
            PipelineError::Io { .. } => "IoError",
        }
    }
}
