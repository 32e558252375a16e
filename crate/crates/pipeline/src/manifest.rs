use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use orch_core::registry::{InputTag, TaskId, TaskKind};
use orch_runtime::JobStatus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::PipelineError;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_NAME: &str = "orch";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path).map_err(PipelineError::io(path))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmRecord {
    pub id: String,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<JobStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_seconds: Option<f64>,
    /// Whether its output entered the bundle.
    pub included: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Index of a bundle. `digest` covers everything except `created_at` and itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: ToolInfo,
    pub created_at: String,
    pub subject_id: String,
    pub task_id: TaskId,
    pub kind: TaskKind,
    /// Keyed by input tag.
    pub inputs: BTreeMap<String, InputRecord>,
    pub algorithms: Vec<AlgorithmRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesized_modality: Option<InputTag>,
    pub warnings: Vec<String>,
    /// Bundle-relative path to sha256, excluding the manifest itself.
    pub files: BTreeMap<String, String>,
    pub digest: String,
}

impl Manifest {
    pub fn compute_digest(&self) -> String {
        let mut m = self.clone();
        m.created_at.clear();
        m.digest.clear();
        sha256_hex(&serde_json::to_vec(&m).expect("manifest serializes"))
    }

    pub fn seal(&mut self) {
        self.digest = self.compute_digest();
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(PipelineError::io(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Hashes every file under `root` other than the manifest.
    pub fn index_files(root: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut files = BTreeMap::new();
        for rel in relative_files(root)? {
            if rel != MANIFEST_FILE {
                files.insert(rel.clone(), sha256_file(&root.join(&rel))?);
            }
        }
        Ok(files)
    }

    /// Problems found when checking the bundle at `root` against this manifest.
    pub fn verify(&self, root: &Path) -> Result<Vec<String>, PipelineError> {
        let mut problems = Vec::new();
        if self.compute_digest() != self.digest {
            problems.push("manifest digest does not match its contents".to_string());
        }
        let actual = Self::index_files(root)?;
        for (rel, hash) in &self.files {
            match actual.get(rel) {
                None => problems.push(format!("{rel} is listed but missing")),
                Some(h) if h != hash => problems.push(format!("{rel} hash differs")),
                _ => {}
            }
        }
        for rel in actual.keys().filter(|r| !self.files.contains_key(*r)) {
            problems.push(format!("{rel} is not listed"));
        }
        Ok(problems)
    }
}

/// Sorted `/`-separated paths of regular files under `root`.
pub fn relative_files(root: &Path) -> Result<Vec<String>, PipelineError> {
    let mut out = Vec::new();
    for entry in WalkDir::new(root).min_depth(1) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            PipelineError::Io {
                path,
                source: e.into(),
            }
        })?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(root).expect("walk stays under root");
            let parts: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            out.push(parts.join("/"));
        }
    }
    out.sort();
    Ok(out)
}
