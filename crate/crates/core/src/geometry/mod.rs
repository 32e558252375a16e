//! Affine transforms between spaces, voxel grids, and resampling of masks and
//! images onto new grids.
//!
//! Transforms map world coordinates (millimeters) of one space into another.
//! Grids map voxel indices to world coordinates with their own affine, at
//! integer voxel coordinates (no implicit half-voxel shift).

mod resample;
mod sidecar;

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nifti::Volume;

pub use resample::{inverse_warp_image_to_native, inverse_warp_to_native, resample_image, resample_mask};
pub use sidecar::{sidecar_file_name, GridRecord, TransformSidecar};

/// Largest accepted condition number of a transform's linear part.
pub const MAX_CONDITION: f64 = 1e12;
/// Smallest accepted determinant magnitude of a transform's linear part.
pub const MIN_DETERMINANT: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("singular transform: {0}")]
    SingularTransform(String),
    #[error("space mismatch: {0}")]
    SpaceMismatch(String),
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("not an affine transform: {0}")]
    NonAffineTransform(String),
    #[error("invalid transform sidecar: {0}")]
    InvalidSidecar(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Space {
    #[serde(rename = "native")]
    Native,
    #[serde(rename = "SRI24")]
    Sri24,
    #[serde(rename = "MNI152")]
    Mni152,
}

impl Space {
    pub const fn as_str(self) -> &'static str {
        match self {
            Space::Native => "native",
            Space::Sri24 => "SRI24",
            Space::Mni152 => "MNI152",
        }
    }

    pub const fn is_atlas(self) -> bool {
        !matches!(self, Space::Native)
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Space {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "native" => Ok(Space::Native),
            "sri24" => Ok(Space::Sri24),
            "mni152" => Ok(Space::Mni152),
            _ => Err(GeometryError::SpaceMismatch(format!("unknown space tag {s:?}"))),
        }
    }
}

/// World-to-world affine from `source_space` into `target_space`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    matrix: Matrix4<f64>,
    source_space: Space,
    target_space: Space,
}

impl AffineTransform {
    pub fn new(matrix: Matrix4<f64>, source_space: Space, target_space: Space) -> Result<Self, GeometryError> {
        check_transform_matrix(&matrix)?;
        Ok(AffineTransform {
            matrix,
            source_space,
            target_space,
        })
    }

    pub fn identity(source_space: Space, target_space: Space) -> Self {
        AffineTransform {
            matrix: Matrix4::identity(),
            source_space,
            target_space,
        }
    }

    pub fn translation(offset: [f64; 3], source_space: Space, target_space: Space) -> Self {
        let mut matrix = Matrix4::identity();
        for i in 0..3 {
            matrix[(i, 3)] = offset[i];
        }
        AffineTransform {
            matrix,
            source_space,
            target_space,
        }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn source_space(&self) -> Space {
        self.source_space
    }

    pub fn target_space(&self) -> Space {
        self.target_space
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = m[(r, 0)] * p[0] + m[(r, 1)] * p[1] + m[(r, 2)] * p[2] + m[(r, 3)];
        }
        out
    }
}

fn check_transform_matrix(m: &Matrix4<f64>) -> Result<(), GeometryError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::SingularTransform("matrix has non-finite entries".into()));
    }
    let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if bottom != [0.0, 0.0, 0.0, 1.0] {
        return Err(GeometryError::NonAffineTransform(format!(
            "bottom row is {bottom:?}, expected [0, 0, 0, 1]"
        )));
    }
    let linear: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let det = linear.determinant();
    if !(det.abs() > MIN_DETERMINANT) {
        return Err(GeometryError::SingularTransform(format!("determinant {det:e}")));
    }
    let sv = linear.singular_values();
    let cond = sv.max() / sv.min();
    if !(cond < MAX_CONDITION) {
        return Err(GeometryError::SingularTransform(format!("condition number {cond:e}")));
    }
    Ok(())
}

/// Inverse transform with swapped space tags.
pub fn invert_affine(t: &AffineTransform) -> Result<AffineTransform, GeometryError> {
    check_transform_matrix(&t.matrix)?;
    let linear: Matrix3<f64> = t.matrix.fixed_view::<3, 3>(0, 0).into_owned();
    let inv_linear = linear
        .try_inverse()
        .ok_or_else(|| GeometryError::SingularTransform("linear part not invertible".into()))?;
    let translation = t.matrix.fixed_view::<3, 1>(0, 3).into_owned();
    let inv_translation = -(inv_linear * translation);
    let mut inv = Matrix4::identity();
    inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&inv_linear);
    inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&inv_translation);
    Ok(AffineTransform {
        matrix: inv,
        source_space: t.target_space,
        target_space: t.source_space,
    })
}

/// `a ∘ b`: apply `b` first, then `a`.
pub fn compose(a: &AffineTransform, b: &AffineTransform) -> Result<AffineTransform, GeometryError> {
    if a.source_space != b.target_space {
        return Err(GeometryError::SpaceMismatch(format!(
            "cannot compose {}→{} after {}→{}",
            a.source_space, a.target_space, b.source_space, b.target_space
        )));
    }
    AffineTransform::new(a.matrix * b.matrix, b.source_space, a.target_space)
}

/// Voxel grid: extents, spacing and voxel-to-world affine in a tagged space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Matrix4<f64>,
    pub space: Space,
}

impl GridSpec {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], affine: Matrix4<f64>, space: Space) -> Self {
        GridSpec {
            shape,
            spacing,
            affine,
            space,
        }
    }

    /// Unit-spaced grid with an identity affine.
    pub fn identity(shape: [usize; 3], space: Space) -> Self {
        GridSpec::new(shape, [1.0; 3], Matrix4::identity(), space)
    }

    pub fn from_volume(vol: &Volume, space: Space) -> Self {
        GridSpec::new(vol.shape(), vol.spacing(), *vol.affine(), space)
    }

    pub fn voxel_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.shape.iter().any(|&s| s == 0) {
            return Err(GeometryError::DegenerateGrid(format!("shape {:?}", self.shape)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(GeometryError::DegenerateGrid(format!("spacing {:?}", self.spacing)));
        }
        check_transform_matrix(&self.affine).map_err(|e| GeometryError::DegenerateGrid(e.to_string()))
    }

    /// Same shape, spacing within `spacing_tol` mm and affine entries within
    /// `affine_tol`. Space tags are not compared.
    pub fn same_geometry(&self, other: &GridSpec, spacing_tol: f64, affine_tol: f64) -> bool {
        self.shape == other.shape
            && self
                .spacing
                .iter()
                .zip(&other.spacing)
                .all(|(a, b)| (a - b).abs() <= spacing_tol)
            && (self.affine - other.affine).abs().max() <= affine_tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(m: Matrix4<f64>) -> f64 {
        m.abs().max()
    }

    #[test]
    fn identity_inverse_swaps_tags() {
        let t = AffineTransform::identity(Space::Native, Space::Sri24);
        let inv = invert_affine(&t).unwrap();
        assert_eq!(inv.matrix(), &Matrix4::identity());
        assert_eq!(inv.source_space(), Space::Sri24);
        assert_eq!(inv.target_space(), Space::Native);
    }

    #[test]
    fn translation_inverse_is_negated() {
        let t = AffineTransform::translation([5.0, -3.0, 2.0], Space::Native, Space::Mni152);
        let inv = invert_affine(&t).unwrap();
        let m = inv.matrix();
        assert_eq!([m[(0, 3)], m[(1, 3)], m[(2, 3)]], [-5.0, 3.0, -2.0]);
    }

    #[test]
    fn zero_determinant_is_singular() {
        let mut m = Matrix4::identity();
        m[(1, 1)] = 0.0;
        assert!(matches!(
            AffineTransform::new(m, Space::Native, Space::Sri24),
            Err(GeometryError::SingularTransform(_))
        ));
    }

    #[test]
    fn ill_conditioned_is_singular() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1e7;
        m[(1, 1)] = 1e-7;
        // det = 1 but condition 1e14
        assert!(matches!(
            AffineTransform::new(m, Space::Native, Space::Sri24),
            Err(GeometryError::SingularTransform(_))
        ));
    }

    #[test]
    fn projective_row_rejected() {
        let mut m = Matrix4::identity();
        m[(3, 0)] = 0.1;
        assert!(matches!(
            AffineTransform::new(m, Space::Native, Space::Sri24),
            Err(GeometryError::NonAffineTransform(_))
        ));
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let m = Matrix4::new(
            0.9, 0.1, 0.0, 4.0, //
            -0.2, 1.1, 0.05, -2.0, //
            0.0, 0.3, 1.2, 7.5, //
            0.0, 0.0, 0.0, 1.0,
        );
        let t = AffineTransform::new(m, Space::Native, Space::Sri24).unwrap();
        let inv = invert_affine(&t).unwrap();
        let id = compose(&t, &inv).unwrap();
        assert!(max_abs(id.matrix() - Matrix4::identity()) < 1e-9);
        assert_eq!(id.source_space(), Space::Sri24);
        assert_eq!(id.target_space(), Space::Sri24);
        let id2 = compose(&inv, &t).unwrap();
        assert!(max_abs(id2.matrix() - Matrix4::identity()) < 1e-9);
    }

    #[test]
    fn translations_compose() {
        let a = AffineTransform::translation([1.0, 0.0, 0.0], Space::Sri24, Space::Mni152);
        let b = AffineTransform::translation([0.0, 2.0, 0.0], Space::Native, Space::Sri24);
        let c = compose(&a, &b).unwrap();
        assert_eq!(c.apply([0.0; 3]), [1.0, 2.0, 0.0]);
        assert_eq!(c.source_space(), Space::Native);
        assert_eq!(c.target_space(), Space::Mni152);
    }

    #[test]
    fn compose_checks_tags() {
        let t = AffineTransform::identity(Space::Native, Space::Sri24);
        assert!(matches!(compose(&t, &t), Err(GeometryError::SpaceMismatch(_))));
    }

    #[test]
    fn space_tags_parse() {
        assert_eq!("sri24".parse::<Space>().unwrap(), Space::Sri24);
        assert_eq!("MNI152".parse::<Space>().unwrap(), Space::Mni152);
        assert!("talairach".parse::<Space>().is_err());
        assert_eq!(serde_json::to_string(&Space::Sri24).unwrap(), "\"SRI24\"");
    }
}
