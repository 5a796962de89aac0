//! Raw volume format: a JSON header `<stem>.json` next to `<stem>.raw`, which
//! holds the voxels as little-endian float32, x fastest.
//!
//! ```json
//! {"format":"mcdncnn-raw","version":1,"dims":[X,Y,Z],"dtype":"f32le","intensity_scale":null}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{IntensityScale, Volume};
use crate::error::{Error, Result};

pub const RAW_FORMAT_NAME: &str = "mcdncnn-raw";
pub const RAW_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub format: String,
    pub version: u32,
    pub dims: [usize; 3],
    pub dtype: String,
    #[serde(default)]
    pub intensity_scale: Option<IntensityScale>,
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

/// Reads a raw volume given either the `.json` header or the `.raw` data path.
pub fn read_raw(path: impl AsRef<Path>) -> Result<Volume> {
    let (json_path, data_path) = paths(path.as_ref());
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: RawHeader = serde_json::from_str(&text)?;
    if header.format != RAW_FORMAT_NAME || header.version != RAW_FORMAT_VERSION {
        return Err(Error::RawFormat(format!(
            "unsupported format {:?} version {}",
            header.format, header.version
        )));
    }
    if header.dtype != "f32le" {
        return Err(Error::RawFormat(format!("unsupported dtype {:?}", header.dtype)));
    }
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let count: usize = header.dims.iter().product();
    if bytes.len() != count * 4 {
        return Err(Error::RawFormat(format!(
            "{}: expected {} bytes for dims {:?}, found {}",
            data_path.display(),
            count * 4,
            header.dims,
            bytes.len()
        )));
    }
    let voxels = bytes.chunks_exact(4).map(LittleEndian::read_f32).collect();
    let mut volume = Volume::new(header.dims, voxels)?;
    volume.intensity_scale = header.intensity_scale;
    Ok(volume)
}

pub fn write_raw(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, data_path) = paths(path.as_ref());
    let header = RawHeader {
        format: RAW_FORMAT_NAME.into(),
        version: RAW_FORMAT_VERSION,
        dims: volume.dims(),
        dtype: "f32le".into(),
        intensity_scale: volume.intensity_scale,
    };
    let mut bytes = vec![0u8; volume.len() * 4];
    LittleEndian::write_f32_into(volume.voxels(), &mut bytes);
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    fs::write(&json_path, serde_json::to_string(&header)? + "\n").map_err(|e| Error::io(&json_path, e))
}
