//! NIfTI-1 single-file volumes (`.nii`, `.nii.gz`).
//!
//! Supported datatypes are uint8, int16, int32, float32 and float64. Either
//! byte order is accepted on read; the writer keeps the byte order of the
//! header it was given. The voxel-to-world affine comes from the sform when
//! `sform_code > 0`, otherwise from the quaternion form, otherwise from a
//! pixdim diagonal.

mod header;
mod volume;

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::{Compression, GzBuilder};
use thiserror::Error;

pub use header::{DataType, Endianness, NiftiHeader, HEADER_SIZE, MAGIC_SINGLE, MIN_VOX_OFFSET};
pub use volume::{header_affine, qform_affine, quaternion_for, sform_affine, Volume, VoxelData};


const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported NIfTI data: {0}")]
    UnsupportedDatatype(String),
    #[error("truncated NIfTI data: need {expected} bytes, file has {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("data not representable: {0}")]
    UnrepresentableData(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NiftiError + '_ {
    move |source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[..2] == GZIP_MAGIC
}

fn inflate(bytes: &[u8]) -> Result<Vec<u8>, std::io::Error> {
    let mut out = Vec::with_capacity(bytes.len() * 4);
    MultiGzDecoder::new(bytes).read_to_end(&mut out)?;
    Ok(out)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, NiftiError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_volume(&bytes).map_err(|e| match e {
        NiftiError::Io { source, .. } => NiftiError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Reads only the header (decompressing as much as needed).
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader, NiftiError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let raw = if is_gzip(&bytes) {
        let mut buf = Vec::with_capacity(HEADER_SIZE);
        MultiGzDecoder::new(&bytes[..])
            .take(HEADER_SIZE as u64)
            .read_to_end(&mut buf)
            .map_err(io_err(path))?;
        buf
    } else {
        bytes
    };
    NiftiHeader::parse(&raw)
}

/// Decodes an in-memory `.nii` or `.nii.gz` image.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume, NiftiError> {
    let inflated;
    let raw = if is_gzip(bytes) {
        inflated = inflate(bytes).map_err(|source| NiftiError::Io {
            path: PathBuf::from("<gzip stream>"),
            source,
        })?;
        &inflated[..]
    } else {
        bytes
    };

    let mut header = NiftiHeader::parse(raw)?;
    let shape = header.shape()?;
    let datatype = header.datatype()?;
    let offset = header.vox_offset as usize;
    let n: usize = shape.iter().product();
    let payload = n * datatype.byte_size();
    if raw.len() < offset + payload {
        return Err(NiftiError::TruncatedData {
            expected: offset + payload,
            actual: raw.len(),
        });
    }
    let extension = raw[HEADER_SIZE..offset].to_vec();
    let big = header.endianness == Endianness::Big;
    let mut data = decode_payload(&raw[offset..offset + payload], datatype, big);

    let slope = header.scl_slope as f64;
    let inter = header.scl_inter as f64;
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        data = VoxelData::Float64(data.to_f64().into_iter().map(|v| v * slope + inter).collect());
        header.scl_slope = 1.0;
        header.scl_inter = 0.0;
        header.datatype_code = DataType::Float64.code();
        header.bitpix = DataType::Float64.bitpix();
    }

    let affine = header_affine(&header);
    let mut spacing = [1.0; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = (header.pixdim[i + 1] as f64).abs();
        if p > 0.0 && p.is_finite() {
            *s = p;
        }
    }
    Volume::with_header(data, shape, spacing, affine, header, extension).map_err(|e| match e {
        NiftiError::InvalidVolume(msg) => NiftiError::MalformedHeader(msg),
        other => other,
    })
}

fn decode_payload(bytes: &[u8], dt: DataType, big: bool) -> VoxelData {
    macro_rules! decode {
        ($t:ty, $n:expr) => {
            bytes
                .chunks_exact($n)
                .map(|c| {
                    let a: [u8; $n] = c.try_into().unwrap();
                    if big {
                        <$t>::from_be_bytes(a)
                    } else {
                        <$t>::from_le_bytes(a)
                    }
                })
                .collect()
        };
    }
    match dt {
        DataType::UInt8 => VoxelData::UInt8(bytes.to_vec()),
        DataType::Int16 => VoxelData::Int16(decode!(i16, 2)),
        DataType::Int32 => VoxelData::Int32(decode!(i32, 4)),
        DataType::Float32 => VoxelData::Float32(decode!(f32, 4)),
        DataType::Float64 => VoxelData::Float64(decode!(f64, 8)),
    }
}

fn encode_payload(data: &VoxelData, big: bool, out: &mut Vec<u8>) {
    macro_rules! encode {
        ($v:expr) => {
            for x in $v {
                out.extend_from_slice(&if big { x.to_be_bytes() } else { x.to_le_bytes() });
            }
        };
    }
    match data {
        VoxelData::UInt8(v) => out.extend_from_slice(v),
        VoxelData::Int16(v) => encode!(v),
        VoxelData::Int32(v) => encode!(v),
        VoxelData::Float32(v) => encode!(v),
        VoxelData::Float64(v) => encode!(v),
    }
}

/// The header `write_volume` emits for `vol`: the retained header with the
/// fields this crate owns (dims, datatype, spacing, scaling, offset, magic,
/// sform and qform) rewritten from the volume.
pub fn output_header(vol: &Volume) -> NiftiHeader {
    let mut h = vol.header().clone();
    let [nx, ny, nz] = vol.shape();
    h.sizeof_hdr = HEADER_SIZE as i32;
    h.dim = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    h.datatype_code = vol.datatype().code();
    h.bitpix = vol.datatype().bitpix();
    let spacing = vol.spacing();
    for i in 0..3 {
        h.pixdim[i + 1] = spacing[i] as f32;
    }
    h.scl_slope = 1.0;
    h.scl_inter = 0.0;
    h.xyzt_units = (h.xyzt_units & !0x07) | 2;
    h.magic = MAGIC_SINGLE;
    let ext = vol.extension();
    h.vox_offset = if ext.len() >= 4 {
        (HEADER_SIZE + ext.len()) as f32
    } else {
        MIN_VOX_OFFSET as f32
    };

    let a = vol.affine();
    let row = |r: usize| [a[(r, 0)] as f32, a[(r, 1)] as f32, a[(r, 2)] as f32, a[(r, 3)] as f32];
    h.srow_x = row(0);
    h.srow_y = row(1);
    h.srow_z = row(2);
    if h.sform_code <= 0 {
        h.sform_code = 1;
    }
    match quaternion_for(a, spacing) {
        Some((b, c, d, qfac)) => {
            if h.qform_code <= 0 {
                h.qform_code = h.sform_code;
            }
            h.quatern_b = b as f32;
            h.quatern_c = c as f32;
            h.quatern_d = d as f32;
            h.qoffset_x = a[(0, 3)] as f32;
            h.qoffset_y = a[(1, 3)] as f32;
            h.qoffset_z = a[(2, 3)] as f32;
            h.pixdim[0] = qfac as f32;
        }
        None => {
            h.qform_code = 0;
            if h.pixdim[0].abs() != 1.0 {
                h.pixdim[0] = 1.0;
            }
        }
    }
    h
}

/// Serializes `vol` to `.nii` bytes, gzip-wrapped when `compress` is set.
pub fn encode_volume(vol: &Volume, compress: bool) -> Result<Vec<u8>, NiftiError> {
    let h = output_header(vol);
    h.check()?;
    let big = h.endianness == Endianness::Big;
    let mut raw = Vec::with_capacity(h.vox_offset as usize + vol.voxel_count() * vol.datatype().byte_size());
    raw.extend_from_slice(&h.to_bytes());
    let ext = vol.extension();
    if ext.len() >= 4 {
        raw.extend_from_slice(ext);
    } else {
        raw.extend_from_slice(&[0; 4]);
    }
    encode_payload(vol.data(), big, &mut raw);
    if !compress {
        return Ok(raw);
    }
    let mut enc = GzBuilder::new().mtime(0).write(Vec::new(), Compression::default());
    let gz = enc
        .write_all(&raw)
        .and_then(|_| enc.finish())
        .map_err(|source| NiftiError::Io {
            path: PathBuf::from("<gzip stream>"),
            source,
        })?;
    Ok(gz)
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>, compress: bool) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let bytes = encode_volume(vol, compress)?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Whether `path` has a `.nii` or `.nii.gz` suffix.
pub fn is_nifti_path(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// File name without the `.nii`/`.nii.gz` suffix.
pub fn nifti_stem(path: &Path) -> Option<&str> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn tiny(data: VoxelData) -> Volume {
        Volume::new(data, [2, 2, 2], [1.0; 3], Matrix4::identity()).unwrap()
    }

    #[test]
    fn scaling_applied_on_read() {
        // raw voxel 3.0 with slope 2 and intercept 1 reads as 7.0
        let vol = tiny(VoxelData::Float32(vec![3.0; 8]));
        let mut bytes = encode_volume(&vol, false).unwrap();
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        let back = decode_volume(&bytes).unwrap();
        assert_eq!(back.data().get(0), 3.0 * 2.0 + 1.0);
        assert!(back.data().to_f64().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn unit_slope_zero_intercept_keeps_raw_type() {
        let vol = tiny(VoxelData::Int16(vec![5; 8]));
        let back = decode_volume(&encode_volume(&vol, false).unwrap()).unwrap();
        assert_eq!(back.data(), &VoxelData::Int16(vec![5; 8]));
    }

    #[test]
    fn compressed_output_has_gzip_magic() {
        let vol = tiny(VoxelData::UInt8(vec![1; 8]));
        let gz = encode_volume(&vol, true).unwrap();
        assert_eq!(&gz[..2], &[0x1f, 0x8b]);
        assert_eq!(decode_volume(&gz).unwrap().data(), vol.data());
    }

    #[test]
    fn truncated_payload() {
        let vol = tiny(VoxelData::Float64(vec![1.0; 8]));
        let bytes = encode_volume(&vol, false).unwrap();
        match decode_volume(&bytes[..bytes.len() - 1]) {
            Err(NiftiError::TruncatedData { expected, actual }) => {
                assert_eq!(expected, 352 + 64);
                assert_eq!(actual, 352 + 63);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sizeof_hdr_300_is_malformed() {
        let vol = tiny(VoxelData::UInt8(vec![0; 8]));
        let mut bytes = encode_volume(&vol, false).unwrap();
        bytes[..4].copy_from_slice(&300i32.to_le_bytes());
        assert!(matches!(decode_volume(&bytes), Err(NiftiError::MalformedHeader(_))));
    }

    #[test]
    fn missing_file_is_io_failure() {
        assert!(matches!(
            read_volume("/nonexistent/file.nii"),
            Err(NiftiError::Io { .. })
        ));
    }

    #[test]
    fn extension_bytes_survive() {
        let vol = tiny(VoxelData::UInt8((0..8).collect()));
        let mut bytes = encode_volume(&vol, false).unwrap();
        // splice in a 16-byte extension: flag 1, esize 16, ecode 4, 8 payload bytes
        let mut ext = vec![1, 0, 0, 0];
        ext.extend_from_slice(&16i32.to_le_bytes());
        ext.extend_from_slice(&4i32.to_le_bytes());
        ext.extend_from_slice(b"opaque!\0");
        let payload = bytes.split_off(352);
        bytes.truncate(348);
        bytes.extend_from_slice(&ext);
        bytes.extend_from_slice(&payload);
        bytes[108..112].copy_from_slice(&((348 + ext.len()) as f32).to_le_bytes());
        let back = decode_volume(&bytes).unwrap();
        assert_eq!(back.extension(), &ext[..]);
        let again = encode_volume(&back, false).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn stems() {
        assert_eq!(nifti_stem(Path::new("/a/b-t1c.nii.gz")), Some("b-t1c"));
        assert_eq!(nifti_stem(Path::new("x.nii")), Some("x"));
        assert_eq!(nifti_stem(Path::new("x.json")), None);
        assert!(is_nifti_path(Path::new("q.nii.gz")));
    }
}
