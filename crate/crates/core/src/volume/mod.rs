//! 3D scalar volumes, their on-disk formats and intensity normalization.

mod nifti;
mod raw;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use nifti::{read_nifti, read_nifti_bytes, write_nifti, write_nifti_bytes, NIFTI_HEADER_SIZE, NIFTI_VOX_OFFSET};
pub use raw::{read_raw, write_raw, RawHeader, RAW_FORMAT_NAME, RAW_FORMAT_VERSION};

use crate::error::{Error, Result};

/// Upper end of the normalized intensity range; the PSNR peak value.
pub const INTENSITY_PEAK: f32 = 255.0;

/// Original intensity range of a normalized volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityScale {
    pub min: f32,
    pub max: f32,
}

/// Voxels are stored x-fastest: index `x + X·(y + Y·z)`. A slice is the
/// contiguous `X × Y` plane at fixed `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f32>,
    pub intensity_scale: Option<IntensityScale>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("volume dims must be positive, got {dims:?}")));
        }
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::shape("Volume::new", &[n], &[voxels.len()]));
        }
        Ok(Volume {
            dims,
            voxels,
            intensity_scale: None,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, vec![0.0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn slices(&self) -> usize {
        self.dims[2]
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.dims[0] * self.dims[1];
        &self.voxels[z * plane..(z + 1) * plane]
    }

    pub fn same_shape(&self, other: &Volume, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(op, &self.dims, &other.dims));
        }
        Ok(())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Maps `[min, max]` affinely onto `[0, 255]` and records the original
    /// range. Normalizing an already normalized volume composes the ranges, so
    /// [`Volume::denormalize`] still recovers the original intensities.
    pub fn normalize(&self) -> Result<Volume> {
        let (lo, hi) = self.min_max();
        if !(hi > lo) {
            return Err(Error::InvalidArgument(
                "cannot normalize a constant volume (undefined scale)".into(),
            ));
        }
        let (lo64, span) = (lo as f64, hi as f64 - lo as f64);
        let peak = INTENSITY_PEAK as f64;
        let voxels = self
            .voxels
            .iter()
            .map(|&v| ((v as f64 - lo64) * peak / span) as f32)
            .collect();
        let scale = match self.intensity_scale {
            None => IntensityScale { min: lo, max: hi },
            Some(prev) => {
                let unit = (prev.max as f64 - prev.min as f64) / peak;
                IntensityScale {
                    min: (prev.min as f64 + lo64 * unit) as f32,
                    max: (prev.min as f64 + hi as f64 * unit) as f32,
                }
            }
        };
        Ok(Volume {
            dims: self.dims,
            voxels,
            intensity_scale: Some(scale),
        })
    }

    /// Inverse of [`Volume::normalize`].
    pub fn denormalize(&self) -> Result<Volume> {
        let scale = self.intensity_scale.ok_or_else(|| {
            Error::InvalidArgument("volume carries no intensity scale to invert".into())
        })?;
        let unit = (scale.max as f64 - scale.min as f64) / INTENSITY_PEAK as f64;
        let voxels = self
            .voxels
            .iter()
            .map(|&v| (scale.min as f64 + v as f64 * unit) as f32)
            .collect();
        Ok(Volume {
            dims: self.dims,
            voxels,
            intensity_scale: None,
        })
    }

    /// Applies another volume's normalization map to this one (used to put a
    /// test volume on the same 0–255 scale as its reference).
    pub fn normalize_like(&self, scale: IntensityScale) -> Result<Volume> {
        if !(scale.max > scale.min) {
            return Err(Error::InvalidArgument("degenerate intensity scale".into()));
        }
        let span = scale.max as f64 - scale.min as f64;
        let voxels = self
            .voxels
            .iter()
            .map(|&v| ((v as f64 - scale.min as f64) * INTENSITY_PEAK as f64 / span) as f32)
            .collect();
        Ok(Volume {
            dims: self.dims,
            voxels,
            intensity_scale: Some(scale),
        })
    }
}

/// Reads a `.nii` file, or a raw volume given either its `.raw` or `.json` path.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("nii") => read_nifti(path),
        Some("raw") | Some("json") => read_raw(path),
        _ => Err(Error::InvalidArgument(format!(
            "{}: unrecognised volume extension (expected .nii, .raw or .json)",
            path.display()
        ))),
    }
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("nii") => write_nifti(volume, path),
        Some("raw") | Some("json") => write_raw(volume, path),
        _ => Err(Error::InvalidArgument(format!(
            "{}: unrecognised volume extension (expected .nii, .raw or .json)",
            path.display()
        ))),
    }
}

pub fn is_volume_path(path: &Path) -> bool {
    matches!(extension(path).as_deref(), Some("nii") | Some("json"))
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}
