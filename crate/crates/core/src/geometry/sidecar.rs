//! JSON sidecar holding a subject's stored native→atlas transform.
//!
//! ```json
//! {"matrix": [16 numbers, row-major], "source_space": "native",
//!  "target_space": "SRI24", "units": "mm"}
//! ```
//!
//! An optional `native_grid` object records the native acquisition grid so
//! masks can be brought back without the original image at hand. A
//! `transform_type` other than `"affine"` is rejected.

use std::fs;
use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::{AffineTransform, GeometryError, GridSpec, Space};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Voxel-to-world, row-major.
    pub affine: Vec<f64>,
}

impl GridRecord {
    pub fn from_grid(grid: &GridSpec) -> Self {
        GridRecord {
            shape: grid.shape,
            spacing: grid.spacing,
            affine: row_major(&grid.affine).to_vec(),
        }
    }

    pub fn to_grid(&self, space: Space) -> Result<GridSpec, GeometryError> {
        let grid = GridSpec::new(self.shape, self.spacing, matrix_from(&self.affine)?, space);
        grid.validate()?;
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSidecar {
    pub matrix: Vec<f64>,
    pub source_space: Space,
    pub target_space: Space,
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub native_grid: Option<GridRecord>,
}

fn row_major(m: &Matrix4<f64>) -> [f64; 16] {
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = m[(r, c)];
        }
    }
    out
}

fn matrix_from(values: &[f64]) -> Result<Matrix4<f64>, GeometryError> {
    if values.len() != 16 {
        return Err(GeometryError::InvalidSidecar(format!(
            "matrix has {} entries, expected 16",
            values.len()
        )));
    }
    Ok(Matrix4::from_row_slice(values))
}

impl TransformSidecar {
    pub fn from_transform(t: &AffineTransform) -> Self {
        TransformSidecar {
            matrix: t.to_row_major().to_vec(),
            source_space: t.source_space(),
            target_space: t.target_space(),
            units: "mm".into(),
            transform_type: None,
            native_grid: None,
        }
    }

    pub fn with_native_grid(mut self, grid: &GridSpec) -> Self {
        self.native_grid = Some(GridRecord::from_grid(grid));
        self
    }

    pub fn transform(&self) -> Result<AffineTransform, GeometryError> {
        if let Some(kind) = &self.transform_type {
            if !kind.eq_ignore_ascii_case("affine") {
                return Err(GeometryError::NonAffineTransform(format!(
                    "transform_type {kind:?} is not supported"
                )));
            }
        }
        if self.units != "mm" {
            return Err(GeometryError::InvalidSidecar(format!(
                "units {:?}, expected \"mm\"",
                self.units
            )));
        }
        AffineTransform::new(matrix_from(&self.matrix)?, self.source_space, self.target_space)
    }

    pub fn native_grid(&self) -> Result<Option<GridSpec>, GeometryError> {
        self.native_grid.as_ref().map(|g| g.to_grid(Space::Native)).transpose()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let sidecar: TransformSidecar = serde_json::from_str(&text)
            .map_err(|e| GeometryError::InvalidSidecar(format!("{}: {e}", path.display())))?;
        sidecar.transform()?;
        Ok(sidecar)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        fs::write(path, text + "\n").map_err(|source| GeometryError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// `<subject>_<from>2<to>.json`
pub fn sidecar_file_name(subject: &str, from: Space, to: Space) -> String {
    format!("{subject}_{}2{}.json", from.as_str(), to.as_str())
}
