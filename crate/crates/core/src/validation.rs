//! Pre-flight checks of a subject's inputs against a task definition.
//!
//! Problems are reported as findings, never as errors; a report fails iff it
//! holds at least one error-severity finding.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{Space, TransformSidecar};
use crate::nifti::{self, NiftiError, Volume};
use crate::registry::{atlas_grid, InputRule, InputTag, TaskId, TaskSpec};

/// Spacing tolerance for inter-modality comparison, mm.
pub const SPACING_TOLERANCE_MM: f64 = 1e-3;
/// Per-entry affine tolerance for inter-modality comparison.
pub const AFFINE_TOLERANCE: f64 = 1e-3;

pub mod codes {
    pub const MISSING_MODALITY: &str = "MISSING_MODALITY";
    pub const WRONG_INPUT_COUNT: &str = "WRONG_INPUT_COUNT";
    pub const UNREADABLE_INPUT: &str = "UNREADABLE_INPUT";
    pub const MALFORMED_NIFTI: &str = "MALFORMED_NIFTI";
    pub const SHAPE_MISMATCH: &str = "SHAPE_MISMATCH";
    pub const SPACING_MISMATCH: &str = "SPACING_MISMATCH";
    pub const AFFINE_MISMATCH: &str = "AFFINE_MISMATCH";
    pub const NONCANONICAL_GRID: &str = "NONCANONICAL_GRID";
    pub const UNKNOWN_FILE: &str = "UNKNOWN_FILE";
    pub const UNEXPECTED_INPUT: &str = "UNEXPECTED_INPUT";
    pub const NEGATIVE_INTENSITY: &str = "NEGATIVE_INTENSITY";
    pub const CONSTANT_INTENSITY: &str = "CONSTANT_INTENSITY";
    pub const NONBINARY_MASK: &str = "NONBINARY_MASK";
    pub const INVALID_SUBJECT_ID: &str = "INVALID_SUBJECT_ID";
    pub const SPACE_MISMATCH: &str = "SPACE_MISMATCH";
    pub const INVALID_TRANSFORM: &str = "INVALID_TRANSFORM";
}

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("cannot read subject directory {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot determine subject id in {0}: {1}")]
    AmbiguousSubject(PathBuf, String),
}

/// `[A-Za-z0-9_-]+`
pub fn is_valid_subject_id(id: &str) -> bool {
    !id.is_empty() && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubjectInputs {
    pub subject_id: String,
    pub files: BTreeMap<InputTag, PathBuf>,
    #[serde(default)]
    pub transform_sidecars: Vec<PathBuf>,
    #[serde(default)]
    pub declared_space: Option<Space>,
    /// Files found next to the inputs that match no input naming rule.
    #[serde(default)]
    pub extra_files: Vec<PathBuf>,
}

impl SubjectInputs {
    pub fn new(subject_id: impl Into<String>) -> Self {
        SubjectInputs {
            subject_id: subject_id.into(),
            ..Default::default()
        }
    }

    pub fn with_file(mut self, tag: InputTag, path: impl Into<PathBuf>) -> Self {
        self.files.insert(tag, path.into());
        self
    }

    pub fn present(&self) -> BTreeSet<InputTag> {
        self.files.keys().copied().collect()
    }

    /// Collects `<subject>-<token>.nii[.gz]` inputs and
    /// `<subject>_native2<space>.json` sidecars from `dir`. Without an
    /// explicit `subject_id` the directory must hold inputs of one subject.
    pub fn discover(dir: &Path, subject_id: Option<&str>) -> Result<Self, ValidationError> {
        let entries = fs::read_dir(dir).map_err(|source| ValidationError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut names: Vec<PathBuf> = Vec::new();
        for e in entries {
            let e = e.map_err(|source| ValidationError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
            if e.file_type().map(|t| t.is_file()).unwrap_or(false) {
                names.push(e.path());
            }
        }
        names.sort();

        let subject = match subject_id {
            Some(s) => s.to_string(),
            None => {
                let ids: BTreeSet<&str> = names
                    .iter()
                    .filter_map(|p| split_input_name(p))
                    .filter(|(_, tag)| tag.is_some())
                    .map(|(s, _)| s)
                    .collect();
                match ids.len() {
                    1 => ids.into_iter().next().unwrap().to_string(),
                    0 => return Err(ValidationError::AmbiguousSubject(dir.into(), "no input files".into())),
                    _ => {
                        return Err(ValidationError::AmbiguousSubject(
                            dir.into(),
                            format!("several subjects: {}", ids.into_iter().collect::<Vec<_>>().join(", ")),
                        ))
                    }
                }
            }
        };

        let mut inputs = SubjectInputs::new(&subject);
        let sidecar_prefix = format!("{subject}_native2");
        for path in names {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            match split_input_name(&path) {
                Some((s, Some(tag))) if s == subject && !inputs.files.contains_key(&tag) => {
                    inputs.files.insert(tag, path);
                }
                _ if name.starts_with(&sidecar_prefix) && name.ends_with(".json") => {
                    inputs.transform_sidecars.push(path);
                }
                _ => inputs.extra_files.push(path),
            }
        }
        Ok(inputs)
    }
}

/// Splits `<subject>-<token>.nii[.gz]` into subject and parsed token.
fn split_input_name(path: &Path) -> Option<(&str, Option<InputTag>)> {
    if !nifti::is_nifti_path(path) {
        return None;
    }
    let stem = nifti::nifti_stem(path)?;
    let (subject, token) = stem.rsplit_once('-')?;
    Some((subject, InputTag::from_token(token)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
}

impl Finding {
    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Error,
            code: code.into(),
            message: message.into(),
            input: None,
        }
    }

    pub fn warning(code: &str, message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Warning,
            ..Finding::error(code, message)
        }
    }

    pub fn on(mut self, input: impl Into<String>) -> Self {
        self.input = Some(input.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRecord {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// sha256 of the affine entries rounded to 1e-6, row-major.
    pub affine_digest: String,
    pub datatype: String,
}

impl GeometryRecord {
    pub fn of(vol: &Volume) -> Self {
        let mut hasher = Sha256::new();
        for r in 0..4 {
            for c in 0..4 {
                let q = (vol.affine()[(r, c)] * 1e6).round() as i64;
                hasher.update(q.to_le_bytes());
            }
        }
        GeometryRecord {
            shape: vol.shape(),
            spacing: vol.spacing(),
            affine_digest: hex::encode(hasher.finalize()),
            datatype: vol.datatype().name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub subject_id: String,
    pub task_id: TaskId,
    pub verdict: Verdict,
    pub findings: Vec<Finding>,
    pub per_modality_geometry: BTreeMap<String, GeometryRecord>,
}

impl ValidationReport {
    fn build(subject_id: &str, task_id: TaskId, findings: Vec<Finding>, geometry: BTreeMap<String, GeometryRecord>) -> Self {
        let verdict = if findings.iter().any(|f| f.severity == Severity::Error) {
            Verdict::Fail
        } else {
            Verdict::Pass
        };
        ValidationReport {
            subject_id: subject_id.to_string(),
            task_id,
            verdict,
            findings,
            per_modality_geometry: geometry,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Warning)
    }

    pub fn count(&self, code: &str) -> usize {
        self.findings.iter().filter(|f| f.code == code).count()
    }
}

/// Compares every volume against the first: shape, spacing within
/// 1e-3 mm and affine entries within 1e-3.
pub fn check_grid_consistency(volumes: &[Volume]) -> Vec<Finding> {
    let named: Vec<(String, &Volume)> = volumes.iter().enumerate().map(|(i, v)| (format!("#{i}"), v)).collect();
    check_named_grids(&named)
}

fn check_named_grids(volumes: &[(String, &Volume)]) -> Vec<Finding> {
    let mut out = Vec::new();
    let Some((first_name, first)) = volumes.first() else {
        return out;
    };
    for (name, v) in &volumes[1..] {
        if v.shape() != first.shape() {
            out.push(
                Finding::error(
                    codes::SHAPE_MISMATCH,
                    format!("{name} has shape {:?}, {first_name} has {:?}", v.shape(), first.shape()),
                )
                .on(name.clone()),
            );
            continue;
        }
        let dspacing = v
            .spacing()
            .iter()
            .zip(first.spacing())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if dspacing > SPACING_TOLERANCE_MM {
            out.push(
                Finding::error(
                    codes::SPACING_MISMATCH,
                    format!("{name} has spacing {:?}, {first_name} has {:?}", v.spacing(), first.spacing()),
                )
                .on(name.clone()),
            );
        }
        let daffine = (v.affine() - first.affine()).abs().max();
        if daffine > AFFINE_TOLERANCE {
            out.push(
                Finding::error(
                    codes::AFFINE_MISMATCH,
                    format!("{name} affine differs from {first_name} by up to {daffine:.6}"),
                )
                .on(name.clone()),
            );
        }
    }
    out
}

fn intensity_findings(tag: InputTag, vol: &Volume) -> Vec<Finding> {
    let data = vol.data();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut nonbinary = false;
    for i in 0..data.len() {
        let v = data.get(i);
        lo = lo.min(v);
        hi = hi.max(v);
        nonbinary |= v != 0.0 && v != 1.0;
    }
    let mut out = Vec::new();
    if tag == InputTag::InpaintMask {
        if nonbinary {
            out.push(Finding::warning(codes::NONBINARY_MASK, format!("{tag} holds values other than 0 and 1")).on(tag.as_str()));
        }
        return out;
    }
    if lo < 0.0 {
        out.push(Finding::warning(codes::NEGATIVE_INTENSITY, format!("{tag} minimum intensity is {lo}")).on(tag.as_str()));
    }
    if lo == hi {
        out.push(Finding::warning(codes::CONSTANT_INTENSITY, format!("{tag} is constant ({lo})")).on(tag.as_str()));
    }
    out
}

fn input_rule_findings(inputs: &SubjectInputs, spec: &TaskSpec) -> Vec<Finding> {
    let present = inputs.present();
    let mut out = Vec::new();
    let allowed: BTreeSet<InputTag> = match &spec.input_rule {
        InputRule::AllOf(req) => {
            for tag in req {
                if !present.contains(tag) {
                    out.push(
                        Finding::error(codes::MISSING_MODALITY, format!("MISSING_MODALITY({tag}): {} requires {tag}", spec.task_id))
                            .on(tag.as_str()),
                    );
                }
            }
            req.iter().copied().collect()
        }
        InputRule::ExactlyOf { count, of } => {
            let n = of.iter().filter(|t| present.contains(t)).count();
            if n < *count {
                let missing: Vec<_> = of.iter().filter(|t| !present.contains(t)).map(|t| t.as_str()).collect();
                out.push(Finding::error(
                    codes::MISSING_MODALITY,
                    format!(
                        "MISSING_MODALITY: {} needs exactly {count} of {} inputs, got {n}; absent: {}",
                        spec.task_id,
                        of.len(),
                        missing.join(", ")
                    ),
                ));
            } else if n > *count {
                out.push(Finding::error(
                    codes::WRONG_INPUT_COUNT,
                    format!("{} needs exactly {count} of {} inputs, got {n}", spec.task_id, of.len()),
                ));
            }
            of.iter().copied().collect()
        }
    };
    for tag in present.difference(&allowed) {
        out.push(Finding::warning(codes::UNEXPECTED_INPUT, format!("{} does not use {tag}; ignored", spec.task_id)).on(tag.as_str()));
    }
    out
}

fn sidecar_findings(inputs: &SubjectInputs, spec: &TaskSpec) -> Vec<Finding> {
    let mut out = Vec::new();
    for path in &inputs.transform_sidecars {
        let name = path.display().to_string();
        match TransformSidecar::read(path) {
            Err(e) => out.push(Finding::error(codes::INVALID_TRANSFORM, format!("{name}: {e}")).on(name.clone())),
            Ok(sc) => {
                if sc.source_space != Space::Native || sc.target_space != spec.spatial_space {
                    out.push(
                        Finding::error(
                            codes::SPACE_MISMATCH,
                            format!(
                                "{name} maps {}→{}, {} needs native→{}",
                                sc.source_space, sc.target_space, spec.task_id, spec.spatial_space
                            ),
                        )
                        .on(name.clone()),
                    );
                }
                if let Err(e) = sc.native_grid() {
                    out.push(Finding::error(codes::INVALID_TRANSFORM, format!("{name}: native_grid: {e}")).on(name.clone()));
                }
            }
        }
    }
    out
}

/// Checks `inputs` against `spec`. Reads every input file but writes nothing.
pub fn validate_subject(inputs: &SubjectInputs, spec: &TaskSpec) -> ValidationReport {
    let mut findings = Vec::new();
    if !is_valid_subject_id(&inputs.subject_id) {
        findings.push(Finding::error(
            codes::INVALID_SUBJECT_ID,
            format!("subject id {:?} must match [A-Za-z0-9_-]+", inputs.subject_id),
        ));
    }
    if let Some(space) = inputs.declared_space {
        if space != spec.spatial_space {
            findings.push(Finding::error(
                codes::SPACE_MISMATCH,
                format!("inputs declared in {space}, {} expects {}", spec.task_id, spec.spatial_space),
            ));
        }
    }
    findings.extend(input_rule_findings(inputs, spec));

    let mut loaded: Vec<(String, Volume)> = Vec::new();
    let mut geometry = BTreeMap::new();
    for (&tag, path) in &inputs.files {
        match nifti::read_volume(path) {
            Ok(vol) => {
                findings.extend(intensity_findings(tag, &vol));
                geometry.insert(tag.as_str().to_string(), GeometryRecord::of(&vol));
                loaded.push((tag.as_str().to_string(), vol));
            }
            Err(NiftiError::Io { path, source }) => findings.push(
                Finding::error(codes::UNREADABLE_INPUT, format!("{tag} at {}: {source}", path.display())).on(tag.as_str()),
            ),
            Err(e) => findings.push(
                Finding::error(codes::MALFORMED_NIFTI, format!("{tag} at {}: {e}", path.display())).on(tag.as_str()),
            ),
        }
    }
    let named: Vec<(String, &Volume)> = loaded.iter().map(|(n, v)| (n.clone(), v)).collect();
    findings.extend(check_named_grids(&named));

    if let (Some(canon), Some((name, first))) = (atlas_grid(spec.spatial_space), named.first()) {
        let spacing_ok = first
            .spacing()
            .iter()
            .zip(canon.spacing)
            .all(|(a, b)| (a - b).abs() <= SPACING_TOLERANCE_MM);
        if first.shape() != canon.shape || !spacing_ok {
            findings.push(Finding::warning(
                codes::NONCANONICAL_GRID,
                format!(
                    "{name} grid {:?} @ {:?} mm differs from the {} grid {:?} @ {:?} mm",
                    first.shape(),
                    first.spacing(),
                    spec.spatial_space,
                    canon.shape,
                    canon.spacing
                ),
            ));
        }
    }

    findings.extend(sidecar_findings(inputs, spec));
    for extra in &inputs.extra_files {
        findings.push(Finding::warning(codes::UNKNOWN_FILE, format!("unrecognized file {}", extra.display())).on(extra.display().to_string()));
    }
    ValidationReport::build(&inputs.subject_id, spec.task_id, findings, geometry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nifti::VoxelData;
    use nalgebra::Matrix4;

    fn vol(shape: [usize; 3], spacing: [f64; 3], shift: f64) -> Volume {
        let n = shape.iter().product();
        let mut affine = Matrix4::from_diagonal(&nalgebra::Vector4::new(spacing[0], spacing[1], spacing[2], 1.0));
        affine[(0, 3)] = shift;
        Volume::new(VoxelData::Float32((0..n).map(|i| i as f32).collect()), shape, spacing, affine).unwrap()
    }

    #[test]
    fn grid_consistency_examples() {
        assert!(check_grid_consistency(&[vol([4, 4, 4], [1.0; 3], 0.0), vol([4, 4, 4], [1.0; 3], 0.0)]).is_empty());
        let f = check_grid_consistency(&[vol([24, 24, 24], [1.0; 3], 0.0), vol([23, 24, 24], [1.0; 3], 0.0)]);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].code, codes::SHAPE_MISMATCH);
        let f = check_grid_consistency(&[vol([4, 4, 4], [1.0; 3], 0.0), vol([4, 4, 4], [1.0; 3], 0.5)]);
        assert_eq!(f.iter().map(|f| f.code.as_str()).collect::<Vec<_>>(), vec![codes::AFFINE_MISMATCH]);
        let f = check_grid_consistency(&[vol([4, 4, 4], [1.0; 3], 0.0), vol([4, 4, 4], [1.0; 3], 0.0009)]);
        assert!(f.is_empty());
        let f = check_grid_consistency(&[vol([4, 4, 4], [1.0; 3], 0.0), vol([4, 4, 4], [1.0, 1.0, 1.5], 0.0)]);
        assert!(f.iter().any(|f| f.code == codes::SPACING_MISMATCH));
    }

    #[test]
    fn subject_ids() {
        assert!(is_valid_subject_id("BraTS-GLI-00001-000"));
        assert!(is_valid_subject_id("sub_01"));
        assert!(!is_valid_subject_id(""));
        assert!(!is_valid_subject_id("../x"));
        assert!(!is_valid_subject_id("a b"));
    }

    #[test]
    fn report_serializes() {
        let r = ValidationReport::build(
            "s",
            TaskId::GliPre,
            vec![Finding::warning(codes::UNKNOWN_FILE, "x")],
            BTreeMap::new(),
        );
        assert!(r.passed());
        let j = serde_json::to_value(&r).unwrap();
        assert_eq!(j["verdict"], "pass");
        assert_eq!(j["findings"][0]["severity"], "warning");
        assert_eq!(j["task_id"], "GLI_PRE");
    }
}
