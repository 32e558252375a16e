//! The 348-byte NIfTI-1 header.
//!
//! Every field of the on-disk layout is kept so that a header read from disk
//! can be written back byte-for-byte. Fields the pipeline does not interpret
//! (descrip, intent, calibration, slice timing) are carried through untouched.

use super::NiftiError;

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const MIN_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
pub const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

const NIFTI2_HEADER_SIZE: i32 = 540;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Endianness {
    #[default]
    Little,
    Big,
}

/// Datatypes the reader and writer accept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataType {
    UInt8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl DataType {
    pub const ALL: [DataType; 5] = [
        DataType::UInt8,
        DataType::Int16,
        DataType::Int32,
        DataType::Float32,
        DataType::Float64,
    ];

    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(Self::UInt8),
            4 => Ok(Self::Int16),
            8 => Ok(Self::Int32),
            16 => Ok(Self::Float32),
            64 => Ok(Self::Float64),
            other => Err(NiftiError::UnsupportedDatatype(format!(
                "datatype code {other}"
            ))),
        }
    }

    pub const fn code(self) -> i16 {
        match self {
            Self::UInt8 => 2,
            Self::Int16 => 4,
            Self::Int32 => 8,
            Self::Float32 => 16,
            Self::Float64 => 64,
        }
    }

    pub const fn bitpix(self) -> i16 {
        (self.byte_size() * 8) as i16
    }

    pub const fn byte_size(self) -> usize {
        match self {
            Self::UInt8 => 1,
            Self::Int16 => 2,
            Self::Int32 | Self::Float32 => 4,
            Self::Float64 => 8,
        }
    }

    pub const fn is_integer(self) -> bool {
        matches!(self, Self::UInt8 | Self::Int16 | Self::Int32)
    }

    /// Inclusive value range representable by an integer datatype.
    pub fn integer_range(self) -> Option<(f64, f64)> {
        match self {
            Self::UInt8 => Some((0.0, u8::MAX as f64)),
            Self::Int16 => Some((i16::MIN as f64, i16::MAX as f64)),
            Self::Int32 => Some((i32::MIN as f64, i32::MAX as f64)),
            Self::Float32 | Self::Float64 => None,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Self::UInt8 => "uint8",
            Self::Int16 => "int16",
            Self::Int32 => "int32",
            Self::Float32 => "float32",
            Self::Float64 => "float64",
        }
    }
}

impl std::fmt::Display for DataType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub endianness: Endianness,
    pub sizeof_hdr: i32,
    pub data_type: [u8; 10],
    pub db_name: [u8; 18],
    pub extents: i32,
    pub session_error: i16,
    pub regular: u8,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p1: f32,
    pub intent_p2: f32,
    pub intent_p3: f32,
    pub intent_code: i16,
    pub datatype_code: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub glmax: i32,
    pub glmin: i32,
    pub descrip: [u8; 80],
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern_b: f32,
    pub quatern_c: f32,
    pub quatern_d: f32,
    pub qoffset_x: f32,
    pub qoffset_y: f32,
    pub qoffset_z: f32,
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub intent_name: [u8; 16],
    pub magic: [u8; 4],
}

impl Default for NiftiHeader {
    fn default() -> Self {
        NiftiHeader {
            endianness: Endianness::Little,
            sizeof_hdr: HEADER_SIZE as i32,
            data_type: [0; 10],
            db_name: [0; 18],
            extents: 0,
            session_error: 0,
            regular: b'r',
            dim_info: 0,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_p1: 0.0,
            intent_p2: 0.0,
            intent_p3: 0.0,
            intent_code: 0,
            datatype_code: DataType::Float32.code(),
            bitpix: DataType::Float32.bitpix(),
            slice_start: 0,
            pixdim: [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vox_offset: MIN_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            xyzt_units: 2,
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            glmax: 0,
            glmin: 0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 0,
            sform_code: 0,
            quatern_b: 0.0,
            quatern_c: 0.0,
            quatern_d: 0.0,
            qoffset_x: 0.0,
            qoffset_y: 0.0,
            qoffset_z: 0.0,
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            intent_name: [0; 16],
            magic: MAGIC_SINGLE,
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    big: bool,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn i16(&mut self) -> i16 {
        let b = self.take::<2>();
        if self.big {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }
    fn i32(&mut self) -> i32 {
        let b = self.take::<4>();
        if self.big {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }
    fn f32(&mut self) -> f32 {
        let b = self.take::<4>();
        if self.big {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

struct Sink {
    buf: Vec<u8>,
    big: bool,
}

impl Sink {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn i16(&mut self, v: i16) {
        let b = if self.big { v.to_be_bytes() } else { v.to_le_bytes() };
        self.buf.extend_from_slice(&b);
    }
    fn i32(&mut self, v: i32) {
        let b = if self.big { v.to_be_bytes() } else { v.to_le_bytes() };
        self.buf.extend_from_slice(&b);
    }
    fn f32(&mut self, v: f32) {
        let b = if self.big { v.to_be_bytes() } else { v.to_le_bytes() };
        self.buf.extend_from_slice(&b);
    }
}

impl NiftiHeader {
    /// Parses and validates a header from the first 348 bytes of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Self, NiftiError> {
        if bytes.len() < 4 {
            return Err(NiftiError::MalformedHeader(
                "file shorter than the sizeof_hdr field".into(),
            ));
        }
        let raw = [bytes[0], bytes[1], bytes[2], bytes[3]];
        let le = i32::from_le_bytes(raw);
        let be = i32::from_be_bytes(raw);
        let big = if le == HEADER_SIZE as i32 {
            false
        } else if be == HEADER_SIZE as i32 {
            true
        } else if le == NIFTI2_HEADER_SIZE || be == NIFTI2_HEADER_SIZE {
            return Err(NiftiError::UnsupportedDatatype(
                "NIfTI-2 file detected (sizeof_hdr 540); only NIfTI-1 is supported".into(),
            ));
        } else {
            return Err(NiftiError::MalformedHeader(format!(
                "sizeof_hdr is {le}, expected 348"
            )));
        };
        if bytes.len() < HEADER_SIZE {
            return Err(NiftiError::TruncatedData {
                expected: HEADER_SIZE,
                actual: bytes.len(),
            });
        }

        let mut c = Cursor { buf: bytes, pos: 0, big };
        let mut h = NiftiHeader {
            endianness: if big { Endianness::Big } else { Endianness::Little },
            sizeof_hdr: c.i32(),
            ..Default::default()
        };
        h.data_type = c.take();
        h.db_name = c.take();
        h.extents = c.i32();
        h.session_error = c.i16();
        h.regular = c.u8();
        h.dim_info = c.u8();
        for d in h.dim.iter_mut() {
            *d = c.i16();
        }
        h.intent_p1 = c.f32();
        h.intent_p2 = c.f32();
        h.intent_p3 = c.f32();
        h.intent_code = c.i16();
        h.datatype_code = c.i16();
        h.bitpix = c.i16();
        h.slice_start = c.i16();
        for p in h.pixdim.iter_mut() {
            *p = c.f32();
        }
        h.vox_offset = c.f32();
        h.scl_slope = c.f32();
        h.scl_inter = c.f32();
        h.slice_end = c.i16();
        h.slice_code = c.u8();
        h.xyzt_units = c.u8();
        h.cal_max = c.f32();
        h.cal_min = c.f32();
        h.slice_duration = c.f32();
        h.toffset = c.f32();
        h.glmax = c.i32();
        h.glmin = c.i32();
        h.descrip = c.take();
        h.aux_file = c.take();
        h.qform_code = c.i16();
        h.sform_code = c.i16();
        h.quatern_b = c.f32();
        h.quatern_c = c.f32();
        h.quatern_d = c.f32();
        h.qoffset_x = c.f32();
        h.qoffset_y = c.f32();
        h.qoffset_z = c.f32();
        for row in [&mut h.srow_x, &mut h.srow_y, &mut h.srow_z] {
            for v in row.iter_mut() {
                *v = c.f32();
            }
        }
        h.intent_name = c.take();
        h.magic = c.take();
        debug_assert_eq!(c.pos, HEADER_SIZE);

        h.check()?;
        Ok(h)
    }

    /// Structural validation shared by the reader and the writer.
    pub fn check(&self) -> Result<(), NiftiError> {
        if self.sizeof_hdr != HEADER_SIZE as i32 {
            return Err(NiftiError::MalformedHeader(format!(
                "sizeof_hdr is {}, expected 348",
                self.sizeof_hdr
            )));
        }
        if self.magic == MAGIC_PAIR {
            return Err(NiftiError::MalformedHeader(
                "header/data pair files (magic ni1) are not supported; use single-file .nii".into(),
            ));
        }
        if self.magic != MAGIC_SINGLE {
            return Err(NiftiError::MalformedHeader(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&self.magic)
            )));
        }
        let rank = self.dim[0];
        if !(1..=7).contains(&rank) {
            return Err(NiftiError::MalformedHeader(format!(
                "dim[0] is {rank}, expected 1..7"
            )));
        }
        for i in 1..=rank as usize {
            if self.dim[i] < 1 {
                return Err(NiftiError::MalformedHeader(format!(
                    "dim[{i}] is {}, expected >= 1",
                    self.dim[i]
                )));
            }
        }
        let dt = DataType::from_code(self.datatype_code)?;
        if self.bitpix != dt.bitpix() {
            return Err(NiftiError::MalformedHeader(format!(
                "bitpix {} does not match datatype {dt} ({} bits)",
                self.bitpix,
                dt.bitpix()
            )));
        }
        if !(self.vox_offset >= MIN_VOX_OFFSET as f32) {
            return Err(NiftiError::MalformedHeader(format!(
                "vox_offset {} is below 352",
                self.vox_offset
            )));
        }
        Ok(())
    }

    pub fn datatype(&self) -> Result<DataType, NiftiError> {
        DataType::from_code(self.datatype_code)
    }

    /// Spatial extents; trailing dimensions must be singleton for a 3D volume.
    pub fn shape(&self) -> Result<[usize; 3], NiftiError> {
        let rank = self.dim[0] as usize;
        let mut shape = [1usize; 3];
        for (i, s) in shape.iter_mut().enumerate().take(rank.min(3)) {
            *s = self.dim[i + 1] as usize;
        }
        for i in 4..=rank {
            if self.dim[i] != 1 {
                return Err(NiftiError::MalformedHeader(format!(
                    "volume is {rank}-dimensional with dim[{i}] = {}; only 3D volumes are supported",
                    self.dim[i]
                )));
            }
        }
        Ok(shape)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut s = Sink {
            buf: Vec::with_capacity(HEADER_SIZE),
            big: self.endianness == Endianness::Big,
        };
        s.i32(self.sizeof_hdr);
        s.bytes(&self.data_type);
        s.bytes(&self.db_name);
        s.i32(self.extents);
        s.i16(self.session_error);
        s.bytes(&[self.regular, self.dim_info]);
        for d in self.dim {
            s.i16(d);
        }
        s.f32(self.intent_p1);
        s.f32(self.intent_p2);
        s.f32(self.intent_p3);
        s.i16(self.intent_code);
        s.i16(self.datatype_code);
        s.i16(self.bitpix);
        s.i16(self.slice_start);
        for p in self.pixdim {
            s.f32(p);
        }
        s.f32(self.vox_offset);
        s.f32(self.scl_slope);
        s.f32(self.scl_inter);
        s.i16(self.slice_end);
        s.bytes(&[self.slice_code, self.xyzt_units]);
        s.f32(self.cal_max);
        s.f32(self.cal_min);
        s.f32(self.slice_duration);
        s.f32(self.toffset);
        s.i32(self.glmax);
        s.i32(self.glmin);
        s.bytes(&self.descrip);
        s.bytes(&self.aux_file);
        s.i16(self.qform_code);
        s.i16(self.sform_code);
        for v in [
            self.quatern_b,
            self.quatern_c,
            self.quatern_d,
            self.qoffset_x,
            self.qoffset_y,
            self.qoffset_z,
        ] {
            s.f32(v);
        }
        for row in [self.srow_x, self.srow_y, self.srow_z] {
            for v in row {
                s.f32(v);
            }
        }
        s.bytes(&self.intent_name);
        s.bytes(&self.magic);
        debug_assert_eq!(s.buf.len(), HEADER_SIZE);
        s.buf
    }

    /// Text of the `descrip` field up to the first NUL.
    pub fn description(&self) -> String {
        let end = self.descrip.iter().position(|&b| b == 0).unwrap_or(80);
        String::from_utf8_lossy(&self.descrip[..end]).into_owned()
    }

    pub fn set_description(&mut self, text: &str) {
        self.descrip = [0; 80];
        let n = text.len().min(79);
        self.descrip[..n].copy_from_slice(&text.as_bytes()[..n]);
    }
}
