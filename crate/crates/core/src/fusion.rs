//! Consensus of candidate label maps by per-label majority voting or by the
//! iterative SIMPLE scheme.
//!
//! Each label is fused as a binary problem. Voxels claimed by more than one
//! label afterwards go to the label with the highest clinical priority
//! (ET > NETC > RC > SNFH/ED > CC).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BinaryMask, SegmentationMask};
use crate::metrics::dice;
use crate::registry::Label;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no candidates to fuse")]
    EmptyCandidateSet,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("label {0} is not permitted")]
    UnknownLabel(u16),
    #[error("invalid fusion parameters: {0}")]
    InvalidParameters(String),
    #[error("duplicate candidate id {0}")]
    DuplicateSource(String),
    #[error("unknown fusion method {0:?}; expected majority or simple")]
    UnknownMethod(String),
}

const GRID_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CandidateSet {
    masks: Vec<SegmentationMask>,
    source_ids: Vec<String>,
    labels: Vec<Label>,
}

impl CandidateSet {
    pub fn new(masks: Vec<SegmentationMask>, source_ids: Vec<String>, labels: Vec<Label>) -> Result<Self, FusionError> {
        if masks.is_empty() {
            return Err(FusionError::EmptyCandidateSet);
        }
        if source_ids.len() != masks.len() {
            return Err(FusionError::InvalidParameters(format!(
                "{} masks but {} source ids",
                masks.len(),
                source_ids.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &source_ids {
            if !seen.insert(id) {
                return Err(FusionError::DuplicateSource(id.clone()));
            }
        }
        let first = masks[0].grid();
        for (m, id) in masks.iter().zip(&source_ids).skip(1) {
            if m.shape() != first.shape {
                return Err(FusionError::GridMismatch(format!(
                    "{id}: shape {:?}, expected {:?}",
                    m.shape(),
                    first.shape
                )));
            }
            if !m.grid().same_geometry(first, GRID_TOLERANCE, GRID_TOLERANCE) {
                return Err(FusionError::GridMismatch(format!("{id}: spacing or affine differs")));
            }
        }
        let permitted: BTreeSet<u16> = labels.iter().map(|l| l.code).collect();
        for m in &masks {
            if let Some(bad) = m.label_set().into_iter().find(|c| *c != 0 && !permitted.contains(c)) {
                return Err(FusionError::UnknownLabel(bad));
            }
        }
        Ok(CandidateSet {
            masks,
            source_ids,
            labels,
        })
    }

    pub fn masks(&self) -> &[SegmentationMask] {
        &self.masks
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Indicator of `label` in `mask`; `label` must be in `permitted`.
pub fn binarize(mask: &SegmentationMask, label: Label, permitted: &[Label]) -> Result<BinaryMask, FusionError> {
    if !permitted.contains(&label) {
        return Err(FusionError::UnknownLabel(label.code));
    }
    Ok(mask.indicator(label.code))
}

/// Combines per-label binary consensus masks into one label map.
fn resolve(set: &CandidateSet, per_label: &[(Label, BinaryMask)]) -> SegmentationMask {
    let mut order: Vec<&(Label, BinaryMask)> = per_label.iter().collect();
    order.sort_by_key(|(l, _)| (l.name.priority(), l.code));
    let n = set.masks[0].labels().len();
    let mut out = vec![0u16; n];
    // lowest priority first so higher priority labels overwrite
    for (label, mask) in order.iter().rev() {
        for (o, &v) in out.iter_mut().zip(mask.voxels()) {
            if v {
                *o = label.code;
            }
        }
    }
    SegmentationMask::new(set.masks[0].grid().clone(), out).expect("labels come from the candidate set")
}

fn strict_majority(indicators: &[BinaryMask], members: &[usize]) -> BinaryMask {
    let shape = indicators[0].shape();
    let n = indicators[0].len();
    let k = members.len();
    let voxels = (0..n)
        .map(|i| 2 * members.iter().filter(|&&c| indicators[c].voxels()[i]).count() > k)
        .collect();
    BinaryMask::new(shape, voxels).expect("same shape")
}

/// Per-label strict majority: a voxel is label-L foreground iff more than
/// half of the candidates say so. An exact tie is background.
pub fn majority_vote(set: &CandidateSet) -> SegmentationMask {
    let all: Vec<usize> = (0..set.len()).collect();
    let per_label: Vec<_> = set
        .labels
        .iter()
        .map(|&l| {
            let ind: Vec<_> = set.masks.iter().map(|m| m.indicator(l.code)).collect();
            (l, strict_majority(&ind, &all))
        })
        .collect();
    resolve(set, &per_label)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimpleParams {
    /// α in the `mean − α·std` drop threshold.
    pub drop_factor: f64,
    pub max_iterations: usize,
    /// Stop once fewer than this fraction of voxels change.
    pub convergence_epsilon: f64,
}

impl Default for SimpleParams {
    fn default() -> Self {
        SimpleParams {
            drop_factor: 1.0,
            max_iterations: 25,
            convergence_epsilon: 1e-4,
        }
    }
}

impl SimpleParams {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.max_iterations < 1 {
            return Err(FusionError::InvalidParameters("max_iterations must be at least 1".into()));
        }
        if !(self.drop_factor > 0.0) || !self.drop_factor.is_finite() {
            return Err(FusionError::InvalidParameters(format!(
                "drop_factor {} must be positive",
                self.drop_factor
            )));
        }
        if !(self.convergence_epsilon > 0.0) {
            return Err(FusionError::InvalidParameters(format!(
                "convergence_epsilon {} must be positive",
                self.convergence_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    Majority,
    Simple,
}

impl FusionMethod {
    pub const fn as_str(self) -> &'static str {
        match self {
            FusionMethod::Majority => "majority",
            FusionMethod::Simple => "simple",
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMethod {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "majority" | "mav" => Ok(FusionMethod::Majority),
            "simple" => Ok(FusionMethod::Simple),
            _ => Err(FusionError::UnknownMethod(s.to_string())),
        }
    }
}

/// Outcome of fusing one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFusion {
    pub code: u16,
    pub iterations: usize,
    /// Final weight per source id; 0 for dropped candidates.
    pub weights: BTreeMap<String, f64>,
    pub dropped: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub consensus: SegmentationMask,
    pub method: FusionMethod,
    pub source_ids: Vec<String>,
    /// Keyed by label name.
    pub per_label: BTreeMap<String, LabelFusion>,
    /// Largest per-label iteration count.
    pub iterations_run: usize,
}

impl FusionResult {
    /// Weight of `source` for the label named `label`.
    pub fn weight(&self, source: &str, label: &str) -> Option<f64> {
        self.per_label.get(label)?.weights.get(source).copied()
    }

    pub fn dropped(&self, label: &str) -> BTreeSet<String> {
        self.per_label.get(label).map(|l| l.dropped.clone()).unwrap_or_default()
    }

    pub fn summary(&self, params: Option<&SimpleParams>) -> FusionSummary {
        FusionSummary {
            method: self.method.as_str().to_string(),
            params: params.copied(),
            source_ids: self.source_ids.clone(),
            iterations_run: self.iterations_run,
            per_label: self.per_label.clone(),
        }
    }
}

/// JSON record written next to a consensus mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<SimpleParams>,
    pub source_ids: Vec<String>,
    pub iterations_run: usize,
    pub per_label: BTreeMap<String, LabelFusion>,
}

/// Sum in ascending order so the result does not depend on candidate order.
fn sorted_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v.into_iter().sum()
}

fn change_fraction(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let changed = a.voxels().iter().zip(b.voxels()).filter(|(x, y)| x != y).count();
    changed as f64 / a.len() as f64
}

fn simple_label(indicators: &[BinaryMask], params: &SimpleParams) -> (BinaryMask, usize, Vec<f64>, Vec<bool>) {
    let n = indicators.len();
    let mut active = vec![true; n];
    let mut weights = vec![0.0; n];
    let all: Vec<usize> = (0..n).collect();
    let mut consensus = strict_majority(indicators, &all);
    let mut iterations = 0;
    while iterations < params.max_iterations {
        iterations += 1;
        let members: Vec<usize> = (0..n).filter(|&c| active[c]).collect();
        let scores: Vec<f64> = members
            .iter()
            .map(|&c| dice(&indicators[c], &consensus).expect("same shape"))
            .collect();

        if members.len() > 1 {
            let k = members.len() as f64;
            let mean = sorted_sum(scores.iter().copied()) / k;
            let var = sorted_sum(scores.iter().map(|s| (s - mean) * (s - mean))) / k;
            let std = var.sqrt();
            if std > 0.0 {
                let threshold = mean - params.drop_factor * std;
                let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for (&c, &s) in members.iter().zip(&scores) {
                    if s < threshold && s < top {
                        active[c] = false;
                    }
                }
            }
        }
        for (&c, &s) in members.iter().zip(&scores) {
            weights[c] = if active[c] { s } else { 0.0 };
        }

        let mut voters: Vec<usize> = (0..n).filter(|&c| active[c]).collect();
        voters.sort_by(|&a, &b| weights[a].total_cmp(&weights[b]));
        let total: f64 = voters.iter().map(|&c| weights[c]).sum();
        let next = if total > 0.0 {
            let len = consensus.len();
            let voxels = (0..len)
                .map(|i| {
                    let yes: f64 = voters
                        .iter()
                        .filter(|&&c| indicators[c].voxels()[i])
                        .map(|&c| weights[c])
                        .sum();
                    2.0 * yes > total
                })
                .collect();
            BinaryMask::new(consensus.shape(), voxels).expect("same shape")
        } else {
            strict_majority(indicators, &voters)
        };
        let changed = change_fraction(&consensus, &next);
        consensus = next;
        if changed < params.convergence_epsilon {
            break;
        }
    }
    (consensus, iterations, weights, active)
}

/// Iterative SIMPLE fusion, run independently per label.
///
/// Starting from the majority vote, each round scores active candidates by
/// Dice against the consensus, drops those scoring below
/// `mean − α·std` (never the top scorer, and not at all when the scores have
/// zero spread), and re-votes with Dice weights.
pub fn simple_fuse(set: &CandidateSet, params: &SimpleParams) -> Result<FusionResult, FusionError> {
    params.validate()?;
    let mut per_label_masks = Vec::new();
    let mut per_label = BTreeMap::new();
    let mut iterations_run = 0;
    for &label in &set.labels {
        let indicators: Vec<_> = set.masks.iter().map(|m| m.indicator(label.code)).collect();
        let (mask, iterations, weights, active) = simple_label(&indicators, params);
        iterations_run = iterations_run.max(iterations);
        per_label.insert(
            label.name.to_string(),
            LabelFusion {
                code: label.code,
                iterations,
                weights: set.source_ids.iter().cloned().zip(weights).collect(),
                dropped: set
                    .source_ids
                    .iter()
                    .zip(&active)
                    .filter(|(_, a)| !**a)
                    .map(|(id, _)| id.clone())
                    .collect(),
            },
        );
        per_label_masks.push((label, mask));
    }
    Ok(FusionResult {
        consensus: resolve(set, &per_label_masks),
        method: FusionMethod::Simple,
        source_ids: set.source_ids.clone(),
        per_label,
        iterations_run: iterations_run.max(1),
    })
}

pub fn fuse(set: &CandidateSet, method: FusionMethod, params: &SimpleParams) -> Result<FusionResult, FusionError> {
    match method {
        FusionMethod::Simple => simple_fuse(set, params),
        FusionMethod::Majority => {
            let per_label = set
                .labels
                .iter()
                .map(|l| {
                    (
                        l.name.to_string(),
                        LabelFusion {
                            code: l.code,
                            iterations: 1,
                            weights: set.source_ids.iter().map(|id| (id.clone(), 1.0)).collect(),
                            dropped: BTreeSet::new(),
                        },
                    )
                })
                .collect();
            Ok(FusionResult {
                consensus: majority_vote(set),
                method,
                source_ids: set.source_ids.clone(),
                per_label,
                iterations_run: 1,
            })
        }
    }
}
