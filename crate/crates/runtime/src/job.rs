use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use orch_core::registry::{ImageReference, IoContract};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::engine::{ContainerConfig, ContainerEngine, Mount, WaitOutcome, JOB_LABEL, OWNER_LABEL};
use crate::RuntimeError;

/// Upper bound on `JobResult::log_excerpt`, in bytes.
pub const LOG_EXCERPT_LIMIT: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub name: String,
    pub image_reference: ImageReference,
    pub input_mount: PathBuf,
    pub output_mount: PathBuf,
    pub io_contract: IoContract,
    pub env: BTreeMap<String, String>,
    pub gpu: bool,
    pub shm_bytes: u64,
    pub timeout_seconds: u64,
    pub cpu_limit: Option<f64>,
}

impl JobSpec {
    pub fn new(name: impl Into<String>, image: ImageReference, input: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        JobSpec {
            name: name.into(),
            image_reference: image,
            input_mount: input.into(),
            output_mount: output.into(),
            io_contract: IoContract::default(),
            env: BTreeMap::new(),
            gpu: false,
            shm_bytes: 0,
            timeout_seconds: 3600,
            cpu_limit: None,
        }
    }

    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.insert(key.into(), value.into());
        self
    }

    pub fn with_timeout(mut self, seconds: u64) -> Self {
        self.timeout_seconds = seconds;
        self
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        for (what, p) in [("input", &self.input_mount), ("output", &self.output_mount)] {
            if !p.is_absolute() {
                return Err(RuntimeError::MountFailure(format!("{what} mount {} is not absolute", p.display())));
            }
            if !p.is_dir() {
                return Err(RuntimeError::MountFailure(format!("{what} mount {} is not an existing directory", p.display())));
            }
        }
        if self.timeout_seconds == 0 {
            return Err(RuntimeError::InvalidJob("timeout_seconds must be positive".into()));
        }
        if let Some(c) = self.cpu_limit {
            if !(c.is_finite() && c > 0.0) {
                return Err(RuntimeError::InvalidJob(format!("cpu_limit {c} must be positive")));
            }
        }
        Ok(())
    }

    fn container_config(&self, owner: &str) -> ContainerConfig {
        ContainerConfig {
            image: self.image_reference.clone(),
            env: self.env.clone(),
            mounts: vec![
                Mount {
                    host: self.input_mount.clone(),
                    container: self.io_contract.input_path.clone(),
                    read_only: true,
                },
                Mount {
                    host: self.output_mount.clone(),
                    container: self.io_contract.output_path.clone(),
                    read_only: false,
                },
            ],
            labels: BTreeMap::from([
                (OWNER_LABEL.to_string(), owner.to_string()),
                (JOB_LABEL.to_string(), self.name.clone()),
            ]),
            gpu: self.gpu,
            shm_bytes: self.shm_bytes,
            cpu_limit: self.cpu_limit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Succeeded,
    NonzeroExit,
    TimedOut,
    EngineError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub status: JobStatus,
    /// `None` when the container never exited on its own.
    pub exit_code: Option<i64>,
    pub duration_seconds: f64,
    pub log_excerpt: String,
    /// Paths relative to the output mount, `/`-separated, sorted.
    pub produced_files: Vec<String>,
}

impl JobResult {
    pub fn succeeded(&self) -> bool {
        self.status == JobStatus::Succeeded
    }
}

/// Tail of `bytes` as text, never longer than `limit` bytes.
pub fn log_excerpt(bytes: &[u8], limit: usize) -> String {
    let mut start = bytes.len().saturating_sub(limit);
    loop {
        // skip a split multi-byte sequence
        while start < bytes.len() && (bytes[start] & 0xC0) == 0x80 {
            start += 1;
        }
        let text = String::from_utf8_lossy(&bytes[start..]);
        if text.len() <= limit {
            return text.into_owned();
        }
        // replacement characters grew the text; drop the excess
        start += text.len() - limit;
    }
}

/// Ensure the image is present locally and matches its pinned digest.
pub fn pull_image(engine: &dyn ContainerEngine, image: &ImageReference) -> Result<(), RuntimeError> {
    engine.ping()?;
    let digests = match engine.image_digests(image)? {
        Some(d) => d,
        None => {
            engine.pull(image)?;
            engine
                .image_digests(image)?
                .ok_or_else(|| RuntimeError::ImageNotFound(image.name.clone()))?
        }
    };
    match &image.digest {
        Some(want) if !digests.iter().any(|d| d == want) => Err(RuntimeError::DigestMismatch {
            image: image.name.clone(),
            expected: want.clone(),
            actual: digests,
        }),
        _ => Ok(()),
    }
}

struct ContainerGuard<'a> {
    engine: &'a dyn ContainerEngine,
    id: String,
}

impl Drop for ContainerGuard<'_> {
    fn drop(&mut self) {
        if let Err(e) = self.engine.remove(&self.id) {
            log::warn!("failed to remove container {}: {e}", self.id);
        }
    }
}

fn lifecycle_error(e: RuntimeError) -> Result<JobResult, RuntimeError> {
    match e {
        RuntimeError::EngineUnreachable(_) | RuntimeError::MountFailure(_) | RuntimeError::GpuUnavailable(_) => Err(e),
        other => Ok(JobResult {
            status: JobStatus::EngineError,
            exit_code: None,
            duration_seconds: 0.0,
            log_excerpt: log_excerpt(other.to_string().as_bytes(), LOG_EXCERPT_LIMIT),
            produced_files: Vec::new(),
        }),
    }
}

/// Run one container to completion. The container is removed on every path.
pub fn run_job(engine: &dyn ContainerEngine, spec: &JobSpec, owner: &str) -> Result<JobResult, RuntimeError> {
    spec.validate()?;
    if spec.gpu && !engine.supports_gpu()? {
        return Err(RuntimeError::GpuUnavailable(format!("job {} requests a GPU", spec.name)));
    }
    let started = Instant::now();
    let id = match engine.create(&spec.container_config(owner)) {
        Ok(id) => id,
        Err(e) => return lifecycle_error(e),
    };
    let guard = ContainerGuard { engine, id };
    if let Err(e) = engine.start(&guard.id) {
        return lifecycle_error(e);
    }
    let timeout = Duration::from_secs(spec.timeout_seconds);
    let outcome = match engine.wait(&guard.id, timeout) {
        Ok(o) => o,
        Err(e) => return lifecycle_error(e),
    };
    let (status, exit_code, elapsed) = match outcome {
        WaitOutcome::Exited { code, elapsed } => {
            let status = if code == 0 { JobStatus::Succeeded } else { JobStatus::NonzeroExit };
            (status, Some(code), elapsed)
        }
        WaitOutcome::TimedOut { elapsed } => {
            if let Err(e) = engine.stop(&guard.id) {
                log::warn!("failed to stop timed-out container {}: {e}", guard.id);
            }
            (JobStatus::TimedOut, None, elapsed)
        }
    };
    let logs = engine.logs(&guard.id).unwrap_or_else(|e| format!("<logs unavailable: {e}>").into_bytes());
    drop(guard);
    let duration = elapsed.unwrap_or_else(|| started.elapsed());
    Ok(JobResult {
        status,
        exit_code,
        duration_seconds: duration.as_secs_f64(),
        log_excerpt: log_excerpt(&logs, LOG_EXCERPT_LIMIT),
        produced_files: list_produced(&spec.output_mount)?,
    })
}

fn list_produced(root: &Path) -> Result<Vec<String>, RuntimeError> {
    let mut out = Vec::new();
    for entry in WalkDir::new(root).min_depth(1) {
        let entry = entry.map_err(|e| RuntimeError::Io(e.to_string()))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(root).expect("walk stays under root");
            let parts: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    out.sort();
    Ok(out)
}

/// Counting semaphore bounding live jobs.
#[derive(Debug)]
struct Admission {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Admission);

impl Admission {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Shared engine handle with an admission limit on concurrent jobs.
pub struct Runtime {
    engine: Arc<dyn ContainerEngine>,
    owner: String,
    max_concurrent: usize,
    admission: Admission,
}

impl Runtime {
    pub fn new(engine: Arc<dyn ContainerEngine>, max_concurrent: usize) -> Result<Self, RuntimeError> {
        Self::with_owner(engine, max_concurrent, default_owner())
    }

    pub fn with_owner(engine: Arc<dyn ContainerEngine>, max_concurrent: usize, owner: impl Into<String>) -> Result<Self, RuntimeError> {
        if max_concurrent == 0 {
            return Err(RuntimeError::InvalidJob("admission limit must be at least 1".into()));
        }
        Ok(Runtime {
            engine,
            owner: owner.into(),
            max_concurrent,
            admission: Admission {
                free: Mutex::new(max_concurrent),
                cv: Condvar::new(),
            },
        })
    }

    pub fn engine(&self) -> &Arc<dyn ContainerEngine> {
        &self.engine
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn max_concurrent(&self) -> usize {
        self.max_concurrent
    }

    pub fn pull_image(&self, image: &ImageReference) -> Result<(), RuntimeError> {
        pull_image(self.engine.as_ref(), image)
    }

    /// Blocks until a slot is free, then runs the job.
    pub fn run_job(&self, spec: &JobSpec) -> Result<JobResult, RuntimeError> {
        let _permit = self.admission.acquire();
        run_job(self.engine.as_ref(), spec, &self.owner)
    }

    pub fn owned_containers(&self) -> Result<Vec<String>, RuntimeError> {
        self.engine.list_owned(&self.owner)
    }

    /// Force-remove anything still carrying this runtime's owner label.
    pub fn cleanup(&self) -> Result<usize, RuntimeError> {
        let ids = self.owned_containers()?;
        for id in &ids {
            self.engine.remove(id)?;
        }
        Ok(ids.len())
    }
}

pub fn default_owner() -> String {
    format!("orch-{}", std::process::id())
}
