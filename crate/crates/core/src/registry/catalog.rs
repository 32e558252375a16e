//! Algorithm catalog: the embedded list of challenge-winning containers,
//! optionally extended or overridden by a JSON file for locally built images.
//!
//! The embedded image references use placeholder digests; an override file
//! supplies the real `name@sha256:…` references for a deployment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{RegistryError, TaskId};

pub const CATALOG_SCHEMA_VERSION: u32 = 1;

const EMBEDDED: &str = include_str!("catalog.json");

/// Container image name with an optional `sha256:` content digest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageReference {
    pub name: String,
    pub digest: Option<String>,
}

impl ImageReference {
    pub fn parse(s: &str) -> Result<Self, RegistryError> {
        let bad = |why: &str| RegistryError::InvalidImageReference(s.to_string(), why.to_string());
        let (name, digest) = match s.split_once('@') {
            Some((name, digest)) => {
                let hex = digest.strip_prefix("sha256:").ok_or_else(|| bad("digest must start with sha256:"))?;
                if hex.len() != 64 || !hex.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
                    return Err(bad("digest must be 64 lowercase hex characters"));
                }
                (name, Some(digest.to_string()))
            }
            None => (s, None),
        };
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(bad("empty or malformed name"));
        }
        Ok(ImageReference {
            name: name.to_string(),
            digest,
        })
    }

    /// Name split into repository and tag (`latest` when absent).
    pub fn repository_and_tag(&self) -> (&str, &str) {
        match self.name.rsplit_once(':') {
            Some((repo, tag)) if !tag.contains('/') => (repo, tag),
            _ => (&self.name, "latest"),
        }
    }
}

impl fmt::Display for ImageReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.digest {
            Some(d) => write!(f, "{}@{d}", self.name),
            None => f.write_str(&self.name),
        }
    }
}

impl FromStr for ImageReference {
    type Err = RegistryError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for ImageReference {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ImageReference {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// In-container I/O locations and file naming for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoContract {
    pub input_path: String,
    pub output_path: String,
}

impl Default for IoContract {
    fn default() -> Self {
        IoContract {
            input_path: "/mlcube_io0".into(),
            output_path: "/mlcube_io1".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmEntry {
    pub id: String,
    pub task_id: TaskId,
    pub year: u16,
    pub rank: u8,
    pub team_reference: String,
    pub image_reference: ImageReference,
    #[serde(default)]
    pub architecture_tags: Vec<String>,
    pub requires_gpu: bool,
    pub shm_bytes: u64,
    pub timeout_seconds: u64,
    #[serde(default)]
    pub io_contract: IoContract,
}

/// On-disk catalog layout, shared by the embedded catalog and override files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogFile {
    pub schema_version: u32,
    pub algorithms: Vec<AlgorithmEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlgorithmSelector {
    LatestWinner,
    Id(String),
}

impl FromStr for AlgorithmSelector {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "latest-winner" | "latest_winner" => AlgorithmSelector::LatestWinner,
            other => AlgorithmSelector::Id(other.to_string()),
        })
    }
}

impl fmt::Display for AlgorithmSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlgorithmSelector::LatestWinner => f.write_str("latest-winner"),
            AlgorithmSelector::Id(id) => f.write_str(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    entries: Vec<AlgorithmEntry>,
}

impl Catalog {
    pub fn embedded() -> Self {
        let file: CatalogFile = serde_json::from_str(EMBEDDED).expect("embedded catalog parses");
        Catalog::from_entries(file.algorithms).expect("embedded catalog is valid")
    }

    pub fn from_entries(entries: Vec<AlgorithmEntry>) -> Result<Self, RegistryError> {
        let mut seen_ids = BTreeSet::new();
        let mut seen_slots = BTreeSet::new();
        for e in &entries {
            if !seen_ids.insert(e.id.clone()) {
                return Err(RegistryError::InvalidCatalog(format!("duplicate id {}", e.id)));
            }
            if !(1..=3).contains(&e.rank) {
                return Err(RegistryError::InvalidCatalog(format!("{}: rank {} outside 1..3", e.id, e.rank)));
            }
            if !seen_slots.insert((e.task_id, e.year, e.rank)) {
                return Err(RegistryError::InvalidCatalog(format!(
                    "{}: ({}, {}, rank {}) already taken",
                    e.id, e.task_id, e.year, e.rank
                )));
            }
            if e.image_reference.digest.is_none() {
                return Err(RegistryError::InvalidCatalog(format!(
                    "{}: image reference {} has no content digest",
                    e.id, e.image_reference
                )));
            }
            if e.timeout_seconds == 0 {
                return Err(RegistryError::InvalidCatalog(format!("{}: timeout must be positive", e.id)));
            }
        }
        Ok(Catalog { entries })
    }

    /// Parses an override file.
    pub fn parse_file(text: &str) -> Result<CatalogFile, RegistryError> {
        let file: CatalogFile =
            serde_json::from_str(text).map_err(|e| RegistryError::InvalidCatalog(e.to_string()))?;
        if file.schema_version != CATALOG_SCHEMA_VERSION {
            return Err(RegistryError::InvalidCatalog(format!(
                "schema_version {} is not supported (expected {CATALOG_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Ok(file)
    }

    /// Entries of `overrides` replace same-id entries and are otherwise added.
    pub fn with_overrides(&self, overrides: Vec<AlgorithmEntry>) -> Result<Self, RegistryError> {
        let mut by_id: BTreeMap<String, usize> = self.entries.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
        let mut entries = self.entries.clone();
        for e in overrides {
            match by_id.get(&e.id) {
                Some(&i) => entries[i] = e,
                None => {
                    by_id.insert(e.id.clone(), entries.len());
                    entries.push(e);
                }
            }
        }
        Catalog::from_entries(entries)
    }

    pub fn with_override_file(&self, path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| RegistryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.with_overrides(Self::parse_file(&text)?.algorithms)
    }

    pub fn entries(&self) -> &[AlgorithmEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&AlgorithmEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Entries for `task`, newest year first, then by rank.
    pub fn list_algorithms(&self, task: TaskId, year: Option<u16>) -> Vec<AlgorithmEntry> {
        let mut out: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.task_id == task && year.map_or(true, |y| e.year == y))
            .cloned()
            .collect();
        out.sort_by(|a, b| b.year.cmp(&a.year).then(a.rank.cmp(&b.rank)).then(a.id.cmp(&b.id)));
        out
    }

    pub fn resolve_algorithm(&self, task: TaskId, selector: &AlgorithmSelector) -> Result<AlgorithmEntry, RegistryError> {
        match selector {
            AlgorithmSelector::LatestWinner => self
                .list_algorithms(task, None)
                .into_iter()
                .find(|e| e.rank == 1)
                .ok_or(RegistryError::NoAlgorithmForTask(task)),
            AlgorithmSelector::Id(id) => match self.get(id) {
                Some(e) if e.task_id == task => Ok(e.clone()),
                Some(e) => Err(RegistryError::UnknownAlgorithm(format!(
                    "{id} (registered for {}, not {task})",
                    e.task_id
                ))),
                None => Err(RegistryError::UnknownAlgorithm(id.clone())),
            },
        }
    }
}
