use nalgebra::{Matrix3, Matrix4, Vector3};

use super::header::{DataType, NiftiHeader};
use super::NiftiError;

/// Typed voxel storage, x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    UInt8(Vec<u8>),
    Int16(Vec<i16>),
    Int32(Vec<i32>),
    Float32(Vec<f32>),
    Float64(Vec<f64>),
}

impl VoxelData {
    pub fn datatype(&self) -> DataType {
        match self {
            Self::UInt8(_) => DataType::UInt8,
            Self::Int16(_) => DataType::Int16,
            Self::Int32(_) => DataType::Int32,
            Self::Float32(_) => DataType::Float32,
            Self::Float64(_) => DataType::Float64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::UInt8(v) => v.len(),
            Self::Int16(v) => v.len(),
            Self::Int32(v) => v.len(),
            Self::Float32(v) => v.len(),
            Self::Float64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            Self::UInt8(v) => v[i] as f64,
            Self::Int16(v) => v[i] as f64,
            Self::Int32(v) => v[i] as f64,
            Self::Float32(v) => v[i] as f64,
            Self::Float64(v) => v[i],
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Converts to `target`, failing if any value cannot be stored exactly
    /// (integer targets) or is out of range.
    pub fn cast(&self, target: DataType) -> Result<VoxelData, NiftiError> {
        if target == self.datatype() {
            return Ok(self.clone());
        }
        let values = self.to_f64();
        if let Some((lo, hi)) = target.integer_range() {
            if let Some((i, v)) = values
                .iter()
                .enumerate()
                .find(|(_, &v)| !(v >= lo && v <= hi) || v.fract() != 0.0)
            {
                return Err(NiftiError::UnrepresentableData(format!(
                    "voxel {i} has value {v}, not representable as {target}"
                )));
            }
        }
        Ok(match target {
            DataType::UInt8 => Self::UInt8(values.iter().map(|&v| v as u8).collect()),
            DataType::Int16 => Self::Int16(values.iter().map(|&v| v as i16).collect()),
            DataType::Int32 => Self::Int32(values.iter().map(|&v| v as i32).collect()),
            DataType::Float32 => {
                if let Some(v) = values
                    .iter()
                    .find(|v| v.is_finite() && v.abs() > f32::MAX as f64)
                {
                    return Err(NiftiError::UnrepresentableData(format!(
                        "value {v} overflows float32"
                    )));
                }
                Self::Float32(values.iter().map(|&v| v as f32).collect())
            }
            DataType::Float64 => Self::Float64(values),
        })
    }
}

/// A 3D voxel grid with its voxel-to-world affine (millimeters).
///
/// Volumes are immutable once built; every constructor enforces the geometric
/// invariants (positive extents and spacing, affine bottom row `0 0 0 1`,
/// invertible linear part, data length matching the shape).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: VoxelData,
    shape: [usize; 3],
    spacing: [f64; 3],
    affine: Matrix4<f64>,
    header: NiftiHeader,
    extension: Vec<u8>,
}

impl Volume {
    /// Builds a volume with a fresh header.
    pub fn new(
        data: VoxelData,
        shape: [usize; 3],
        spacing: [f64; 3],
        affine: Matrix4<f64>,
    ) -> Result<Self, NiftiError> {
        let mut header = NiftiHeader {
            qform_code: 1,
            sform_code: 1,
            ..Default::default()
        };
        header.datatype_code = data.datatype().code();
        header.bitpix = data.datatype().bitpix();
        Self::with_header(data, shape, spacing, affine, header, Vec::new())
    }

    /// Builds a volume from parts obtained elsewhere, keeping `header` and the
    /// opaque extension bytes for a later write.
    pub fn with_header(
        data: VoxelData,
        shape: [usize; 3],
        spacing: [f64; 3],
        affine: Matrix4<f64>,
        header: NiftiHeader,
        extension: Vec<u8>,
    ) -> Result<Self, NiftiError> {
        if shape.iter().any(|&s| s == 0) {
            return Err(NiftiError::InvalidVolume(format!(
                "shape {shape:?} has a zero extent"
            )));
        }
        if shape.iter().any(|&s| s > i16::MAX as usize) {
            return Err(NiftiError::InvalidVolume(format!(
                "shape {shape:?} exceeds the NIfTI-1 extent limit"
            )));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(NiftiError::InvalidVolume(format!(
                "data has {} voxels, shape {shape:?} needs {n}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(NiftiError::InvalidVolume(format!(
                "spacing {spacing:?} must be positive"
            )));
        }
        check_affine(&affine)?;
        Ok(Volume {
            data,
            shape,
            spacing,
            affine,
            header,
            extension,
        })
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn into_data(self) -> VoxelData {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn header(&self) -> &NiftiHeader {
        &self.header
    }

    /// Extension bytes between the header and the voxel data, kept opaque.
    pub fn extension(&self) -> &[u8] {
        &self.extension
    }

    pub fn voxel_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn datatype(&self) -> DataType {
        self.data.datatype()
    }

    /// Same geometry and header with new voxel values.
    pub fn with_data(&self, data: VoxelData) -> Result<Self, NiftiError> {
        Self::with_header(
            data,
            self.shape,
            self.spacing,
            self.affine,
            self.header.clone(),
            self.extension.clone(),
        )
    }

    pub fn cast(&self, target: DataType) -> Result<Self, NiftiError> {
        self.with_data(self.data.cast(target)?)
    }
}

pub(crate) fn check_affine(affine: &Matrix4<f64>) -> Result<(), NiftiError> {
    let bottom = [affine[(3, 0)], affine[(3, 1)], affine[(3, 2)], affine[(3, 3)]];
    if bottom != [0.0, 0.0, 0.0, 1.0] {
        return Err(NiftiError::InvalidVolume(format!(
            "affine bottom row is {bottom:?}, expected [0, 0, 0, 1]"
        )));
    }
    if affine.iter().any(|v| !v.is_finite()) {
        return Err(NiftiError::InvalidVolume("affine has non-finite entries".into()));
    }
    let det = affine.fixed_view::<3, 3>(0, 0).determinant();
    if !(det.abs() > 1e-12) {
        return Err(NiftiError::InvalidVolume(format!(
            "affine linear part is singular (det {det:e})"
        )));
    }
    Ok(())
}

/// The voxel-to-world affine stored in `h`: sform when `sform_code > 0`, else
/// the quaternion form when `qform_code > 0`, else a pixdim diagonal.
pub fn header_affine(h: &NiftiHeader) -> Matrix4<f64> {
    if h.sform_code > 0 {
        sform_affine(h)
    } else if h.qform_code > 0 {
        qform_affine(h)
    } else {
        let mut m = Matrix4::identity();
        for i in 0..3 {
            let d = h.pixdim[i + 1] as f64;
            m[(i, i)] = if d > 0.0 { d } else { 1.0 };
        }
        m
    }
}

pub fn sform_affine(h: &NiftiHeader) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for (r, row) in [h.srow_x, h.srow_y, h.srow_z].iter().enumerate() {
        for c in 0..4 {
            m[(r, c)] = row[c] as f64;
        }
    }
    m
}

pub fn qform_affine(h: &NiftiHeader) -> Matrix4<f64> {
    let mut b = h.quatern_b as f64;
    let mut c = h.quatern_c as f64;
    let mut d = h.quatern_d as f64;
    let s = 1.0 - (b * b + c * c + d * d);
    let a = if s < 1e-7 {
        let n = (b * b + c * c + d * d).sqrt();
        b /= n;
        c /= n;
        d /= n;
        0.0
    } else {
        s.sqrt()
    };
    let r = Matrix3::new(
        a * a + b * b - c * c - d * d,
        2.0 * (b * c - a * d),
        2.0 * (b * d + a * c),
        2.0 * (b * c + a * d),
        a * a + c * c - b * b - d * d,
        2.0 * (c * d - a * b),
        2.0 * (b * d - a * c),
        2.0 * (c * d + a * b),
        a * a + d * d - c * c - b * b,
    );
    let px = |i: usize| {
        let v = h.pixdim[i] as f64;
        if v > 0.0 {
            v
        } else {
            1.0
        }
    };
    let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let scale = [px(1), px(2), px(3) * qfac];
    let mut m = Matrix4::identity();
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = r[(i, j)] * scale[j];
        }
    }
    m[(0, 3)] = h.qoffset_x as f64;
    m[(1, 3)] = h.qoffset_y as f64;
    m[(2, 3)] = h.qoffset_z as f64;
    m
}

/// Quaternion parameters `(b, c, d, qfac)` for `affine` when its linear part
/// is a rotation (possibly with a reflection) times `diag(spacing)`; `None` for
/// sheared or otherwise non-rigid affines, which have no qform encoding.
pub fn quaternion_for(affine: &Matrix4<f64>, spacing: [f64; 3]) -> Option<(f64, f64, f64, f64)> {
    let mut r = Matrix3::zeros();
    for j in 0..3 {
        let col = Vector3::new(affine[(0, j)], affine[(1, j)], affine[(2, j)]);
        let norm = col.norm();
        if ((norm - spacing[j]) / spacing[j]).abs() > 1e-5 {
            return None;
        }
        for i in 0..3 {
            r[(i, j)] = col[i] / norm;
        }
    }
    if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-5 {
        return None;
    }
    let mut qfac = 1.0;
    if r.determinant() < 0.0 {
        qfac = -1.0;
        for i in 0..3 {
            r[(i, 2)] = -r[(i, 2)];
        }
    }
    let (r11, r12, r13) = (r[(0, 0)], r[(0, 1)], r[(0, 2)]);
    let (r21, r22, r23) = (r[(1, 0)], r[(1, 1)], r[(1, 2)]);
    let (r31, r32, r33) = (r[(2, 0)], r[(2, 1)], r[(2, 2)]);
    let trace = r11 + r22 + r33 + 1.0;
    let (mut a, mut b, mut c, mut d);
    if trace > 0.5 {
        a = 0.5 * trace.sqrt();
        b = 0.25 * (r32 - r23) / a;
        c = 0.25 * (r13 - r31) / a;
        d = 0.25 * (r21 - r12) / a;
    } else {
        let xd = 1.0 + r11 - (r22 + r33);
        let yd = 1.0 + r22 - (r11 + r33);
        let zd = 1.0 + r33 - (r11 + r22);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (r12 + r21) / b;
            d = 0.25 * (r13 + r31) / b;
            a = 0.25 * (r32 - r23) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (r12 + r21) / c;
            d = 0.25 * (r23 + r32) / c;
            a = 0.25 * (r13 - r31) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (r13 + r31) / d;
            c = 0.25 * (r23 + r32) / d;
            a = 0.25 * (r21 - r12) / d;
        }
        if a < 0.0 {
            b = -b;
            c = -c;
            d = -d;
            a = -a;
        }
    }
    let _ = a;
    Some((b, c, d, qfac))
}
