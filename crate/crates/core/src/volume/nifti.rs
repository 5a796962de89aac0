//! Minimal single-file NIfTI-1 (`.nii`) support.
//!
//! Reads uncompressed 3D volumes (or 4D with one frame) stored as uint8,
//! int16 or float32 in either byte order, applying `scl_slope`/`scl_inter`.
//! Writes little-endian float32 with `vox_offset` 352.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};

use super::Volume;
use crate::error::{Error, Result};

pub const NIFTI_HEADER_SIZE: usize = 348;
pub const NIFTI_VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_MAGIC: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn i16(self, b: &[u8]) -> i16 {
        match self {
            Endian::Little => LittleEndian::read_i16(b),
            Endian::Big => BigEndian::read_i16(b),
        }
    }

    fn i32(self, b: &[u8]) -> i32 {
        match self {
            Endian::Little => LittleEndian::read_i32(b),
            Endian::Big => BigEndian::read_i32(b),
        }
    }

    fn f32(self, b: &[u8]) -> f32 {
        match self {
            Endian::Little => LittleEndian::read_f32(b),
            Endian::Big => BigEndian::read_f32(b),
        }
    }
}

fn nifti_err(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Nifti {
        field,
        reason: reason.into(),
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_nifti_bytes(&bytes)
}

pub fn read_nifti_bytes(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(nifti_err(
            "sizeof_hdr",
            format!("file has {} bytes, header needs {NIFTI_HEADER_SIZE}", bytes.len()),
        ));
    }
    let header = &bytes[..NIFTI_HEADER_SIZE];

    // dim[0] must lie in 1..=7; whichever byte order makes it plausible wins
    let plausible = |e: Endian| (1..=7).contains(&e.i16(&header[OFF_DIM..]));
    let endian = if plausible(Endian::Little) {
        Endian::Little
    } else if plausible(Endian::Big) {
        Endian::Big
    } else {
        return Err(nifti_err("dim", "dim[0] is not in 1..=7 in either byte order"));
    };

    let sizeof_hdr = endian.i32(&header[0..]);
    if sizeof_hdr != NIFTI_HEADER_SIZE as i32 {
        return Err(nifti_err("sizeof_hdr", format!("expected 348, found {sizeof_hdr}")));
    }
    if &header[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
        return Err(nifti_err(
            "magic",
            format!("expected \"n+1\\0\", found {:?}", &header[OFF_MAGIC..OFF_MAGIC + 4]),
        ));
    }

    let dim: Vec<i16> = (0..8).map(|i| endian.i16(&header[OFF_DIM + 2 * i..])).collect();
    match dim[0] {
        3 => {}
        4 if dim[4] == 1 => {}
        n => {
            return Err(nifti_err(
                "dim",
                format!("only 3D volumes (or 4D with one frame) are supported, dim = {dim:?} (rank {n})"),
            ))
        }
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(nifti_err("dim", format!("non-positive extent in {dim:?}")));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let count: usize = dims.iter().product();

    let datatype = endian.i16(&header[OFF_DATATYPE..]);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };

    let vox_offset = endian.f32(&header[OFF_VOX_OFFSET..]);
    if !(vox_offset >= NIFTI_HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(nifti_err("vox_offset", format!("invalid data offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let needed = count * width;
    let data = bytes.get(start..).filter(|d| d.len() >= needed).ok_or_else(|| {
        nifti_err(
            "vox_offset",
            format!(
                "data section truncated: need {needed} bytes from offset {start}, file has {}",
                bytes.len()
            ),
        )
    })?;

    let mut voxels: Vec<f32> = match datatype {
        DT_UINT8 => data[..needed].iter().map(|&b| b as f32).collect(),
        DT_INT16 => data[..needed].chunks_exact(2).map(|c| endian.i16(c) as f32).collect(),
        _ => data[..needed].chunks_exact(4).map(|c| endian.f32(c)).collect(),
    };

    let slope = endian.f32(&header[OFF_SCL_SLOPE..]);
    let inter = endian.f32(&header[OFF_SCL_INTER..]);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0) {
        voxels.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Volume::new(dims, voxels)
}

pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_nifti_bytes(volume)).map_err(|e| Error::io(path, e))
}

pub fn write_nifti_bytes(volume: &Volume) -> Vec<u8> {
    let mut out = header_bytes(volume.dims(), DT_FLOAT32, 32, 1.0, 0.0);
    for &v in volume.voxels() {
        out.write_f32::<LittleEndian>(v).expect("write to Vec");
    }
    out
}

/// Little-endian header plus the 4-byte empty extension block.
fn header_bytes(dims: [usize; 3], datatype: i16, bitpix: i16, slope: f32, inter: f32) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..], NIFTI_HEADER_SIZE as i32);
    h[38] = b'r'; // regular
    let dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[OFF_DIM + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut h[OFF_DATATYPE..], datatype);
    LittleEndian::write_i16(&mut h[OFF_BITPIX..], bitpix);
    for i in 0..8 {
        LittleEndian::write_f32(&mut h[OFF_PIXDIM + 4 * i..], 1.0);
    }
    LittleEndian::write_f32(&mut h[OFF_VOX_OFFSET..], NIFTI_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[OFF_SCL_SLOPE..], slope);
    LittleEndian::write_f32(&mut h[OFF_SCL_INTER..], inter);
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);
    h
}
