use std::path::{Path, PathBuf};
use std::sync::Arc;

use orch_core::fusion::{FusionMethod, SimpleParams};
use orch_core::metrics::MetricParams;
use orch_core::registry::{AlgorithmSelector, Catalog, TaskId};
use orch_runtime::{ContainerEngine, Endpoint, HttpEngine, MockEngine};
use serde::{Deserialize, Serialize};

use crate::PipelineError;

pub const CATALOG_OVERRIDE_ENV: &str = "ORCH_CATALOG_OVERRIDE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EngineBackend {
    /// Local engine daemon; `endpoint` falls back to `ORCH_ENGINE_ENDPOINT`.
    RealEngine {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        endpoint: Option<String>,
    },
    Mock { behavior_table: PathBuf },
}

impl Default for EngineBackend {
    fn default() -> Self {
        EngineBackend::RealEngine { endpoint: None }
    }
}

impl EngineBackend {
    pub fn connect(&self) -> Result<Arc<dyn ContainerEngine>, PipelineError> {
        Ok(match self {
            EngineBackend::RealEngine { endpoint: Some(e) } => Arc::new(HttpEngine::new(e.parse::<Endpoint>()?)),
            EngineBackend::RealEngine { endpoint: None } => Arc::new(HttpEngine::from_env()?),
            EngineBackend::Mock { behavior_table } => Arc::new(MockEngine::from_file(behavior_table)?),
        })
    }
}

fn default_selectors() -> Vec<String> {
    vec![AlgorithmSelector::LatestWinner.to_string()]
}

fn default_method() -> FusionMethod {
    FusionMethod::Majority
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub task_id: TaskId,
    /// `latest-winner` or catalog ids.
    #[serde(default = "default_selectors")]
    pub algorithm_selectors: Vec<String>,
    #[serde(default = "default_method")]
    pub fusion_method: FusionMethod,
    #[serde(default)]
    pub fusion_params: SimpleParams,
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub parallel_jobs: usize,
    #[serde(default)]
    pub native_space_output: bool,
    #[serde(default)]
    pub engine_backend: EngineBackend,
    #[serde(default)]
    pub keep_intermediate: bool,
    /// Replace an existing bundle.
    #[serde(default)]
    pub force: bool,
    /// Ground truth for `metrics.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_mask: Option<PathBuf>,
    #[serde(default)]
    pub metric_params: MetricParams,
}

impl PipelineConfig {
    pub fn new(task_id: TaskId, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            task_id,
            algorithm_selectors: default_selectors(),
            fusion_method: default_method(),
            fusion_params: SimpleParams::default(),
            output_dir: output_dir.into(),
            parallel_jobs: 1,
            native_space_output: false,
            engine_backend: EngineBackend::default(),
            keep_intermediate: false,
            force: false,
            reference_mask: None,
            metric_params: MetricParams::default(),
        }
    }

    pub fn with_algorithms<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.algorithm_selectors = ids.into_iter().map(Into::into).collect();
        self
    }

    pub fn selectors(&self) -> Vec<AlgorithmSelector> {
        self.algorithm_selectors.iter().map(|s| s.parse().expect("infallible")).collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.parallel_jobs == 0 {
            return Err(PipelineError::InvalidConfig("parallel_jobs must be at least 1".into()));
        }
        if self.algorithm_selectors.is_empty() {
            return Err(PipelineError::InvalidConfig("no algorithm selected".into()));
        }
        self.fusion_params
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(PipelineError::io(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// Embedded catalog with overrides from `explicit`, else `ORCH_CATALOG_OVERRIDE`.
pub fn load_catalog(explicit: Option<&Path>) -> Result<Catalog, PipelineError> {
    let base = Catalog::embedded();
    let from_env = std::env::var_os(CATALOG_OVERRIDE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    match explicit.map(Path::to_path_buf).or(from_env) {
        Some(p) => Ok(base.with_override_file(&p)?),
        None => Ok(base),
    }
}
