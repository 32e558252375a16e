//! Label maps and binary masks.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::geometry::{GridSpec, Space};
use crate::nifti::{NiftiError, Volume, VoxelData};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask has {actual} voxels, grid {shape:?} needs {expected}")]
    LengthMismatch {
        shape: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("voxel {index} holds {value}, which is not a label code")]
    NotALabel { index: usize, value: f64 },
    #[error(transparent)]
    Nifti(#[from] NiftiError),
}

/// Linear voxel index, x fastest.
#[inline]
pub fn linear_index(shape: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + shape[0] * (y + shape[1] * z)
}

/// A hard label map on a grid. Voxel values are label codes, 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    grid: GridSpec,
    labels: Vec<u16>,
}

impl SegmentationMask {
    pub fn new(grid: GridSpec, labels: Vec<u16>) -> Result<Self, MaskError> {
        let expected = grid.voxel_count();
        if labels.len() != expected {
            return Err(MaskError::LengthMismatch {
                shape: grid.shape,
                expected,
                actual: labels.len(),
            });
        }
        Ok(SegmentationMask { grid, labels })
    }

    /// All-background mask on `grid`.
    pub fn empty(grid: GridSpec) -> Self {
        let n = grid.voxel_count();
        SegmentationMask {
            grid,
            labels: vec![0; n],
        }
    }

    /// Interprets an integer-valued volume as a label map in `space`.
    pub fn from_volume(vol: &Volume, space: Space) -> Result<Self, MaskError> {
        let data = vol.data();
        let labels = match data {
            VoxelData::UInt8(v) => v.iter().map(|&x| x as u16).collect(),
            _ => {
                let mut out = Vec::with_capacity(data.len());
                for i in 0..data.len() {
                    let value = data.get(i);
                    if !(0.0..=u16::MAX as f64).contains(&value) || value.fract() != 0.0 {
                        return Err(MaskError::NotALabel { index: i, value });
                    }
                    out.push(value as u16);
                }
                out
            }
        };
        Self::new(GridSpec::from_volume(vol, space), labels)
    }

    /// A uint8 volume for writing; labels above 255 are `UnrepresentableData`.
    pub fn to_volume(&self) -> Result<Volume, NiftiError> {
        if let Some((i, &v)) = self.labels.iter().enumerate().find(|(_, &v)| v > u8::MAX as u16) {
            return Err(NiftiError::UnrepresentableData(format!(
                "label {v} at voxel {i} does not fit in uint8"
            )));
        }
        Volume::new(
            VoxelData::UInt8(self.labels.iter().map(|&v| v as u8).collect()),
            self.grid.shape,
            self.grid.spacing,
            self.grid.affine,
        )
    }

    /// Like [`SegmentationMask::to_volume`] but keeping the header of `template`.
    pub fn to_volume_like(&self, template: &Volume) -> Result<Volume, NiftiError> {
        let vol = self.to_volume()?;
        Volume::with_header(
            vol.into_data(),
            self.grid.shape,
            self.grid.spacing,
            self.grid.affine,
            template.header().clone(),
            template.extension().to_vec(),
        )
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u16> {
        self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[linear_index(self.grid.shape, x, y, z)]
    }

    /// Distinct nonzero codes present.
    pub fn label_set(&self) -> BTreeSet<u16> {
        self.labels.iter().copied().filter(|&v| v != 0).collect()
    }

    pub fn indicator(&self, code: u16) -> BinaryMask {
        BinaryMask {
            shape: self.grid.shape,
            voxels: self.labels.iter().map(|&v| v == code).collect(),
        }
    }

    /// Foreground of any label.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            shape: self.grid.shape,
            voxels: self.labels.iter().map(|&v| v != 0).collect(),
        }
    }

    pub fn with_space(mut self, space: Space) -> Self {
        self.grid.space = space;
        self
    }
}

/// A boolean voxel grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    shape: [usize; 3],
    voxels: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: [usize; 3], voxels: Vec<bool>) -> Result<Self, MaskError> {
        let expected: usize = shape.iter().product();
        if voxels.len() != expected {
            return Err(MaskError::LengthMismatch {
                shape,
                expected,
                actual: voxels.len(),
            });
        }
        Ok(BinaryMask { shape, voxels })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        BinaryMask {
            shape,
            voxels: vec![false; shape.iter().product()],
        }
    }

    pub fn from_indices(shape: [usize; 3], indices: impl IntoIterator<Item = [usize; 3]>) -> Self {
        let mut m = Self::zeros(shape);
        for [x, y, z] in indices {
            m.set(x, y, z, true);
        }
        m
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn any(&self) -> bool {
        self.voxels.iter().any(|&v| v)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[linear_index(self.shape, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = linear_index(self.shape, x, y, z);
        self.voxels[i] = value;
    }

    pub fn set_linear(&mut self, i: usize, value: bool) {
        self.voxels[i] = value;
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.shape;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Coordinates of set voxels in scan order.
    pub fn foreground_coords(&self) -> Vec<[usize; 3]> {
        self.voxels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| self.coords(i))
            .collect()
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.voxels
            .iter()
            .zip(&other.voxels)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        BinaryMask {
            shape: self.shape,
            voxels: self.voxels.iter().zip(&other.voxels).map(|(&a, &b)| a || b).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nifti::{DataType, NiftiError};

    #[test]
    fn label_300_is_unrepresentable_as_uint8() {
        let grid = GridSpec::identity([2, 1, 1], Space::Native);
        let m = SegmentationMask::new(grid, vec![0, 300]).unwrap();
        assert!(matches!(m.to_volume(), Err(NiftiError::UnrepresentableData(_))));
    }

    #[test]
    fn from_volume_rejects_fractional_and_negative() {
        let grid = GridSpec::identity([2, 1, 1], Space::Native);
        let v = Volume::new(VoxelData::Float32(vec![1.0, 0.5]), grid.shape, grid.spacing, grid.affine).unwrap();
        assert!(matches!(
            SegmentationMask::from_volume(&v, Space::Native),
            Err(MaskError::NotALabel { index: 1, .. })
        ));
        let v = Volume::new(VoxelData::Int16(vec![-1, 2]), grid.shape, grid.spacing, grid.affine).unwrap();
        assert!(SegmentationMask::from_volume(&v, Space::Native).is_err());
        let v = Volume::new(VoxelData::Int16(vec![4, 2]), grid.shape, grid.spacing, grid.affine).unwrap();
        let m = SegmentationMask::from_volume(&v, Space::Native).unwrap();
        assert_eq!(m.labels(), &[4, 2]);
        assert_eq!(m.to_volume().unwrap().datatype(), DataType::UInt8);
    }

    #[test]
    fn coords_invert_linear_index() {
        let m = BinaryMask::zeros([3, 4, 5]);
        for i in 0..m.len() {
            let [x, y, z] = m.coords(i);
            assert_eq!(linear_index([3, 4, 5], x, y, z), i);
        }
    }
}
