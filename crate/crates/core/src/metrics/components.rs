//! 3D connected components and lesion-wise Dice.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{check_grids, dice, MetricsError};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub const fn value(self) -> u8 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    pub fn from_value(n: u8) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            18 => Some(Connectivity::Eighteen),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    fn offsets(self) -> Vec<[isize; 3]> {
        let max_l1 = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    if l1 > 0 && l1 <= max_l1 {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

impl FromStr for Connectivity {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .parse::<u8>()
            .ok()
            .and_then(Connectivity::from_value)
            .ok_or_else(|| MetricsError::InvalidParameter(format!("connectivity {s:?}, expected 6, 18 or 26")))
    }
}

impl Serialize for Connectivity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.value())
    }
}

impl<'de> Deserialize<'de> for Connectivity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let n = u8::deserialize(d)?;
        Connectivity::from_value(n).ok_or_else(|| serde::de::Error::custom(format!("connectivity {n}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub shape: [usize; 3],
    /// 0 is background, `1..=component_count` are components.
    pub component_map: Vec<u32>,
    pub component_count: usize,
    pub connectivity: Connectivity,
    /// Voxel count of component `k` at index `k - 1`.
    pub sizes: Vec<usize>,
}

impl ComponentLabeling {
    pub fn component(&self, id: u32) -> BinaryMask {
        let voxels = self.component_map.iter().map(|&c| c == id).collect();
        BinaryMask::new(self.shape, voxels).expect("same shape")
    }
}

/// Labels connected foreground regions. Ids follow the scan order (x fastest)
/// of each component's first voxel.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabeling {
    let shape = mask.shape();
    let [nx, ny, nz] = shape;
    let offsets = connectivity.offsets();
    let mut map = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask.voxels()[start] || map[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        map[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = mask.coords(i);
            for d in &offsets {
                let (qx, qy, qz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
                if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize {
                    continue;
                }
                let j = qx as usize + nx * (qy as usize + ny * qz as usize);
                if mask.voxels()[j] && map[j] == 0 {
                    map[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    ComponentLabeling {
        shape,
        component_map: map,
        component_count: sizes.len(),
        connectivity,
        sizes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionScore {
    /// Component id in the reference labeling.
    pub lesion_id: u32,
    pub voxels: usize,
    pub dsc: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionwiseReport {
    pub lesions: Vec<LesionScore>,
    pub false_positives: usize,
    /// Reference lesions smaller than the size threshold.
    pub ignored_reference_lesions: usize,
}

impl LesionwiseReport {
    /// Mean over lesions, with each false positive counted as a zero score.
    /// 1 when there are neither lesions nor false positives.
    pub fn mean_dsc(&self) -> f64 {
        let n = self.lesions.len() + self.false_positives;
        if n == 0 {
            return 1.0;
        }
        self.lesions.iter().map(|l| l.dsc).sum::<f64>() / n as f64
    }
}

/// Lesion-wise Dice. Each reference lesion of at least `min_lesion_voxels`
/// voxels is scored against the union of all prediction components that
/// overlap it. Prediction components touching no reference foreground are
/// false positives.
pub fn lesionwise_dice(
    reference: &BinaryMask,
    prediction: &BinaryMask,
    connectivity: Connectivity,
    min_lesion_voxels: usize,
) -> Result<LesionwiseReport, MetricsError> {
    check_grids(reference, prediction)?;
    let refs = connected_components(reference, connectivity);
    let preds = connected_components(prediction, connectivity);

    let mut lesions = Vec::new();
    let mut ignored = 0;
    for id in 1..=refs.component_count as u32 {
        let size = refs.sizes[id as usize - 1];
        if size < min_lesion_voxels {
            ignored += 1;
            continue;
        }
        let mut hit = vec![false; preds.component_count + 1];
        for (r, p) in refs.component_map.iter().zip(&preds.component_map) {
            if *r == id && *p != 0 {
                hit[*p as usize] = true;
            }
        }
        let matched = hit.iter().any(|&h| h);
        let dsc = if matched {
            let union: Vec<bool> = preds.component_map.iter().map(|&p| hit[p as usize] && p != 0).collect();
            let union = BinaryMask::new(preds.shape, union).expect("same shape");
            dice(&refs.component(id), &union)?
        } else {
            0.0
        };
        lesions.push(LesionScore {
            lesion_id: id,
            voxels: size,
            dsc,
            matched,
        });
    }

    let mut touches = vec![false; preds.component_count + 1];
    for (&p, &r) in preds.component_map.iter().zip(reference.voxels()) {
        if r {
            touches[p as usize] = true;
        }
    }
    let false_positives = (1..=preds.component_count).filter(|&k| !touches[k]).count();
    Ok(LesionwiseReport {
        lesions,
        false_positives,
        ignored_reference_lesions: ignored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(shape: [usize; 3], lo: [usize; 3], side: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(shape);
        for z in lo[2]..lo[2] + side {
            for y in lo[1]..lo[1] + side {
                for x in lo[0]..lo[0] + side {
                    m.set(x, y, z, true);
                }
            }
        }
        m
    }

    #[test]
    fn neighbor_counts() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }

    #[test]
    fn face_diagonal_pair() {
        let m = BinaryMask::from_indices([3, 3, 3], [[0, 0, 0], [1, 1, 0]]);
        assert_eq!(connected_components(&m, Connectivity::Six).component_count, 2);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).component_count, 1);
        let corner = BinaryMask::from_indices([3, 3, 3], [[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&corner, Connectivity::Eighteen).component_count, 2);
        assert_eq!(connected_components(&corner, Connectivity::TwentySix).component_count, 1);
    }

    #[test]
    fn empty_and_cube() {
        assert_eq!(connected_components(&BinaryMask::zeros([4, 4, 4]), Connectivity::Six).component_count, 0);
        let c = cube([5, 5, 5], [1, 1, 1], 3);
        for conn in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            let l = connected_components(&c, conn);
            assert_eq!(l.component_count, 1);
            assert_eq!(l.sizes, vec![27]);
        }
    }

    #[test]
    fn ids_follow_scan_order() {
        let m = BinaryMask::from_indices([6, 2, 2], [[4, 0, 0], [1, 1, 1], [0, 0, 1]]);
        let l = connected_components(&m, Connectivity::Six);
        assert_eq!(l.component_count, 3);
        assert_eq!(l.component_map[4], 1);
        assert_eq!(l.component_map[6 * 2], 2);
    }

    #[test]
    fn lesionwise_examples() {
        let shape = [8, 8, 8];
        let a = cube(shape, [0, 0, 0], 2);
        let b = cube(shape, [5, 5, 5], 2);
        let perfect = lesionwise_dice(&a, &a, Connectivity::TwentySix, 0).unwrap();
        assert_eq!(perfect.lesions.len(), 1);
        assert_eq!(perfect.lesions[0].dsc, 1.0);
        assert_eq!(perfect.false_positives, 0);

        let reference = a.union(&b);
        let r = lesionwise_dice(&reference, &a, Connectivity::TwentySix, 0).unwrap();
        let scores: Vec<_> = r.lesions.iter().map(|l| (l.dsc, l.matched)).collect();
        assert_eq!(scores, vec![(1.0, true), (0.0, false)]);

        let empty = BinaryMask::zeros(shape);
        let fp = lesionwise_dice(&empty, &a, Connectivity::TwentySix, 0).unwrap();
        assert!(fp.lesions.is_empty());
        assert_eq!(fp.false_positives, 1);
    }

    #[test]
    fn small_reference_lesions_ignored() {
        let shape = [8, 8, 8];
        let big = cube(shape, [0, 0, 0], 3);
        let dot = BinaryMask::from_indices(shape, [[6, 6, 6]]);
        let r = lesionwise_dice(&big.union(&dot), &big, Connectivity::TwentySix, 2).unwrap();
        assert_eq!(r.lesions.len(), 1);
        assert_eq!(r.ignored_reference_lesions, 1);
    }

    #[test]
    fn split_prediction_is_unioned() {
        let shape = [8, 4, 4];
        let reference = BinaryMask::from_indices(shape, (0..6).map(|x| [x, 1, 1]));
        let prediction = BinaryMask::from_indices(shape, [[0, 1, 1], [1, 1, 1], [4, 1, 1], [5, 1, 1]]);
        let r = lesionwise_dice(&reference, &prediction, Connectivity::Six, 0).unwrap();
        assert_eq!(r.lesions.len(), 1);
        assert!((r.lesions[0].dsc - 0.8).abs() < 1e-12);
    }
}
