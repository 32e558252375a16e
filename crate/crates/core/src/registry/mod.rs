//! Segmentation and synthesis task definitions plus the catalog of shipped
//! algorithm containers.

mod catalog;
mod tasks;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use catalog::{
    AlgorithmEntry, AlgorithmSelector, Catalog, CatalogFile, ImageReference, IoContract, CATALOG_SCHEMA_VERSION,
};
pub use tasks::{atlas_grid, get_task_spec, task_spec, AtlasGrid, InputRule, TaskKind, TaskSpec};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("unknown task {0:?}; valid tasks: {valid}", valid = TaskId::cli_names().join(", "))]
    UnknownTask(String),
    #[error("unknown algorithm {0}")]
    UnknownAlgorithm(String),
    #[error("no algorithm registered for task {0}")]
    NoAlgorithmForTask(TaskId),
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("invalid image reference {0:?}: {1}")]
    InvalidImageReference(String, String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskId {
    GliPre,
    GliPost,
    Ssa,
    MenPre,
    Mets,
    Ped,
    Goat,
    MenRt,
    Inpaint,
    MissingMri,
}

impl TaskId {
    pub const ALL: [TaskId; 10] = [
        TaskId::GliPre,
        TaskId::GliPost,
        TaskId::Ssa,
        TaskId::MenPre,
        TaskId::Mets,
        TaskId::Ped,
        TaskId::Goat,
        TaskId::MenRt,
        TaskId::Inpaint,
        TaskId::MissingMri,
    ];

    pub const SEGMENTATION: [TaskId; 8] = [
        TaskId::GliPre,
        TaskId::GliPost,
        TaskId::Ssa,
        TaskId::MenPre,
        TaskId::Mets,
        TaskId::Ped,
        TaskId::Goat,
        TaskId::MenRt,
    ];

    /// `GLI_PRE` style identifier.
    pub const fn as_str(self) -> &'static str {
        match self {
            TaskId::GliPre => "GLI_PRE",
            TaskId::GliPost => "GLI_POST",
            TaskId::Ssa => "SSA",
            TaskId::MenPre => "MEN_PRE",
            TaskId::Mets => "METS",
            TaskId::Ped => "PED",
            TaskId::Goat => "GOAT",
            TaskId::MenRt => "MEN_RT",
            TaskId::Inpaint => "INPAINT",
            TaskId::MissingMri => "MISSING_MRI",
        }
    }

    /// `gli-pre` style identifier used on the command line and in paths.
    pub fn cli_name(self) -> String {
        self.as_str().to_ascii_lowercase().replace('_', "-")
    }

    pub fn cli_names() -> Vec<String> {
        Self::ALL.iter().map(|t| t.cli_name()).collect()
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = RegistryError;

    /// Accepts `GLI_PRE`, `gli-pre` and `gli_pre`; `peds` is an alias of `PED`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        let norm = if norm == "PEDS" { "PED".to_string() } else { norm };
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| RegistryError::UnknownTask(s.to_string()))
    }
}

/// Imaging inputs and auxiliary inputs a task may consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InputTag {
    T1c,
    T1n,
    T2w,
    #[serde(rename = "FLA")]
    Fla,
    /// Binary region to inpaint.
    #[serde(rename = "mask")]
    InpaintMask,
}

impl InputTag {
    pub const MODALITIES: [InputTag; 4] = [InputTag::T1c, InputTag::T1n, InputTag::T2w, InputTag::Fla];

    pub const fn as_str(self) -> &'static str {
        match self {
            InputTag::T1c => "T1c",
            InputTag::T1n => "T1n",
            InputTag::T2w => "T2w",
            InputTag::Fla => "FLA",
            InputTag::InpaintMask => "mask",
        }
    }

    /// Token in `<subject>-<token>.nii.gz` file names.
    pub const fn file_token(self) -> &'static str {
        match self {
            InputTag::T1c => "t1c",
            InputTag::T1n => "t1n",
            InputTag::T2w => "t2w",
            InputTag::Fla => "fla",
            InputTag::InpaintMask => "mask",
        }
    }

    /// Parses a file-name token; `t2f` and `flair` are accepted for FLAIR.
    pub fn from_token(token: &str) -> Option<InputTag> {
        match token.to_ascii_lowercase().as_str() {
            "t1c" => Some(InputTag::T1c),
            "t1n" => Some(InputTag::T1n),
            "t2w" => Some(InputTag::T2w),
            "fla" | "t2f" | "flair" => Some(InputTag::Fla),
            "mask" => Some(InputTag::InpaintMask),
            _ => None,
        }
    }

    pub const fn is_modality(self) -> bool {
        !matches!(self, InputTag::InpaintMask)
    }
}

impl fmt::Display for InputTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preprocessing {
    CoRegistration,
    SkullStripping,
    AtlasRegistration,
    Defacing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelName {
    ET,
    NETC,
    SNFH,
    ED,
    CC,
    RC,
    GTV,
    WT,
}

impl LabelName {
    /// Rank when several labels claim the same voxel after per-label fusion;
    /// lower wins. ET > NETC > RC > SNFH/ED > CC, with GTV and WT last.
    pub const fn priority(self) -> u8 {
        match self {
            LabelName::ET => 0,
            LabelName::NETC => 1,
            LabelName::RC => 2,
            LabelName::SNFH | LabelName::ED => 3,
            LabelName::CC => 4,
            LabelName::GTV => 5,
            LabelName::WT => 6,
        }
    }
}

impl fmt::Display for LabelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub code: u16,
    pub name: LabelName,
}

impl Label {
    pub const fn new(code: u16, name: LabelName) -> Self {
        Label { code, name }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name, self.code)
    }
}

/// Integer codes of the tumor subregions.
pub mod codes {
    use super::{Label, LabelName};

    pub const NETC: Label = Label::new(1, LabelName::NETC);
    pub const SNFH: Label = Label::new(2, LabelName::SNFH);
    pub const ED: Label = Label::new(2, LabelName::ED);
    pub const ET: Label = Label::new(3, LabelName::ET);
    pub const RC: Label = Label::new(4, LabelName::RC);
    pub const CC: Label = Label::new(4, LabelName::CC);
    pub const GTV: Label = Label::new(1, LabelName::GTV);
}
