//! Engine abstraction shared by the HTTP client and the mock.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use orch_core::registry::ImageReference;
use serde::{Deserialize, Serialize};

use crate::RuntimeError;

/// Label key marking containers created by this tool.
pub const OWNER_LABEL: &str = "org.brats-orch.owner";
/// Label key carrying the job name.
pub const JOB_LABEL: &str = "org.brats-orch.job";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    RealEngine,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mount {
    pub host: PathBuf,
    pub container: String,
    pub read_only: bool,
}

/// Everything needed to create one container.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainerConfig {
    pub image: ImageReference,
    pub env: BTreeMap<String, String>,
    pub mounts: Vec<Mount>,
    pub labels: BTreeMap<String, String>,
    pub gpu: bool,
    pub shm_bytes: u64,
    pub cpu_limit: Option<f64>,
}

impl ContainerConfig {
    pub fn mount_at(&self, container_path: &str) -> Option<&Mount> {
        self.mounts.iter().find(|m| m.container == container_path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WaitOutcome {
    /// Container exited. `elapsed` is reported by engines with their own clock.
    Exited { code: i64, elapsed: Option<Duration> },
    TimedOut { elapsed: Option<Duration> },
}

/// Minimal container engine surface.
///
/// Implementations must be shareable across job threads.
pub trait ContainerEngine: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn ping(&self) -> Result<(), RuntimeError>;
    /// Digests known for a local image, or `None` when it is absent.
    fn image_digests(&self, image: &ImageReference) -> Result<Option<Vec<String>>, RuntimeError>;
    fn pull(&self, image: &ImageReference) -> Result<(), RuntimeError>;
    fn create(&self, config: &ContainerConfig) -> Result<String, RuntimeError>;
    fn start(&self, id: &str) -> Result<(), RuntimeError>;
    fn wait(&self, id: &str, timeout: Duration) -> Result<WaitOutcome, RuntimeError>;
    fn stop(&self, id: &str) -> Result<(), RuntimeError>;
    fn logs(&self, id: &str) -> Result<Vec<u8>, RuntimeError>;
    /// Force-remove a container and its anonymous volumes.
    fn remove(&self, id: &str) -> Result<(), RuntimeError>;
    /// Ids of containers carrying `OWNER_LABEL=owner`.
    fn list_owned(&self, owner: &str) -> Result<Vec<String>, RuntimeError>;
    fn supports_gpu(&self) -> Result<bool, RuntimeError>;
}
