//! Overlap, surface-distance and lesion-wise evaluation of segmentations.
//!
//! Conventions: Dice and NSD of two empty masks are 1; the Hausdorff
//! distance is undefined (`None`) when either mask is empty.

mod components;
mod surface;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use components::{connected_components, lesionwise_dice, ComponentLabeling, Connectivity, LesionScore, LesionwiseReport};
pub use surface::{hausdorff, nsd, squared_distance_transform, surface};

use crate::mask::{BinaryMask, SegmentationMask};
use crate::registry::Label;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub(crate) fn check_grids(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::GridMismatch(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    check_grids(a, b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * a.intersection_count(b) as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricParams {
    pub hd_percentile: f64,
    pub nsd_tolerance_mm: f64,
    pub connectivity: Connectivity,
    pub min_lesion_voxels: usize,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams {
            hd_percentile: 95.0,
            nsd_tolerance_mm: 1.0,
            connectivity: Connectivity::TwentySix,
            min_lesion_voxels: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub code: Vec<u16>,
    pub dsc: f64,
    pub hd95_mm: Option<f64>,
    pub nsd: f64,
    pub lesionwise_dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub params: MetricParams,
    pub spacing_mm: [f64; 3],
    /// Keyed by label name. A `WT` entry (union of all labels) is added when
    /// the task has more than one label.
    pub per_label: BTreeMap<String, LabelMetrics>,
    pub lesionwise: BTreeMap<String, LesionwiseReport>,
}

fn label_metrics(
    codes: Vec<u16>,
    reference: &BinaryMask,
    prediction: &BinaryMask,
    spacing: [f64; 3],
    params: &MetricParams,
) -> Result<(LabelMetrics, LesionwiseReport), MetricsError> {
    let lesions = lesionwise_dice(reference, prediction, params.connectivity, params.min_lesion_voxels)?;
    let metrics = LabelMetrics {
        code: codes,
        dsc: dice(reference, prediction)?,
        hd95_mm: hausdorff(reference, prediction, spacing, params.hd_percentile)?,
        nsd: nsd(reference, prediction, spacing, params.nsd_tolerance_mm)?,
        lesionwise_dsc: lesions.mean_dsc(),
    };
    Ok((metrics, lesions))
}

/// Scores `prediction` against `reference` for each of `labels`.
pub fn evaluate(
    reference: &SegmentationMask,
    prediction: &SegmentationMask,
    labels: &[Label],
    params: &MetricParams,
) -> Result<MetricReport, MetricsError> {
    if !reference.grid().same_geometry(prediction.grid(), 1e-3, 1e-3) {
        return Err(MetricsError::GridMismatch(
            "reference and prediction grids differ".into(),
        ));
    }
    let spacing = reference.grid().spacing;
    let mut per_label = BTreeMap::new();
    let mut lesionwise = BTreeMap::new();
    for label in labels {
        let (m, l) = label_metrics(
            vec![label.code],
            &reference.indicator(label.code),
            &prediction.indicator(label.code),
            spacing,
            params,
        )?;
        per_label.insert(label.name.to_string(), m);
        lesionwise.insert(label.name.to_string(), l);
    }
    if labels.len() > 1 {
        let codes: Vec<u16> = labels.iter().map(|l| l.code).collect();
        let union = |m: &SegmentationMask| {
            let v = m.labels().iter().map(|c| codes.contains(c)).collect();
            BinaryMask::new(m.shape(), v).expect("same shape")
        };
        let (m, l) = label_metrics(codes.clone(), &union(reference), &union(prediction), spacing, params)?;
        per_label.insert("WT".into(), m);
        lesionwise.insert("WT".into(), l);
    }
    Ok(MetricReport {
        params: *params,
        spacing_mm: spacing,
        per_label,
        lesionwise,
    })
}
