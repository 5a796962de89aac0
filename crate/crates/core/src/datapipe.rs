//! Training data: 5-slice stacks, sliding-window patch extraction and the
//! noise-specific / general training regimes.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{add_rician, noise_sweep_levels, NoiseLevel};
use crate::tensor::Tensor;
use crate::volume::Volume;

pub const PATCH_SIZE: usize = 60;
/// Slices per input stack: the centre slice and two neighbours on each side.
pub const STACK_DEPTH: usize = 5;
pub const CENTER_CHANNEL: usize = STACK_DEPTH / 2;
pub const DEFAULT_STRIDE: usize = 20;
pub const DEFAULT_TARGET_COUNT: usize = 150_000;
/// The network sees intensities divided by 255 (0–1 instead of the 0–255
/// volume scale), so its residual predictions are O(0.1) at the working noise
/// levels rather than O(10).
pub const NETWORK_SCALE: f32 = 1.0 / crate::volume::INTENSITY_PEAK;

/// A noisy `[P, P, 5]` stack with the clean and noisy centre slices `[P, P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub noisy_stack: Tensor,
    pub clean_center: Tensor,
    pub noisy_center: Tensor,
    pub level_percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Regime {
    /// One network per noise level.
    Specific(f64),
    /// One network for all listed levels.
    General(Vec<f64>),
}

impl Regime {
    /// General regime over the evaluation sweep.
    pub fn general() -> Self {
        Regime::General(noise_sweep_levels())
    }

    pub fn levels(&self) -> Vec<f64> {
        match self {
            Regime::Specific(p) => vec![*p],
            Regime::General(ps) => ps.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels.is_empty() {
            return Err(Error::InvalidArgument("general regime needs at least one level".into()));
        }
        if let Some(p) = levels.iter().find(|&&p| !(p > 0.0 && p <= 100.0)) {
            return Err(Error::InvalidArgument(format!("noise level {p} outside (0, 100]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch: usize,
    pub stride: usize,
    pub target_count: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch: PATCH_SIZE,
            stride: DEFAULT_STRIDE,
            target_count: DEFAULT_TARGET_COUNT,
        }
    }
}

/// Location of one patch: source volume, slice and top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatchCoord {
    pub source: usize,
    pub slice: usize,
    pub row: usize,
    pub col: usize,
}

/// Slice indices `s−2 ..= s+2`, clamped to the volume (edge replication).
pub fn stack_slices(slices: usize, s: usize) -> [usize; STACK_DEPTH] {
    std::array::from_fn(|i| (s + i).saturating_sub(CENTER_CHANNEL).min(slices - 1))
}

/// The `[Y, X, 5]` stack of slices around `s`.
pub fn make_stack(volume: &Volume, s: usize) -> Result<Tensor> {
    let [nx, ny, nz] = volume.dims();
    if s >= nz {
        return Err(Error::InvalidArgument(format!("slice {s} out of range for {nz} slices")));
    }
    let channels = stack_slices(nz, s);
    let mut data = Vec::with_capacity(nx * ny * STACK_DEPTH);
    for y in 0..ny {
        for x in 0..nx {
            data.extend(channels.iter().map(|&z| volume.get(x, y, z)));
        }
    }
    Tensor::from_vec(&[ny, nx, STACK_DEPTH], data)
}

/// Number of window positions along one axis.
pub fn grid_count(extent: usize, patch: usize, stride: usize) -> usize {
    if patch > extent || stride == 0 {
        0
    } else {
        (extent - patch) / stride + 1
    }
}

fn check_geometry(dims: [usize; 3], config: &PatchConfig) -> Result<()> {
    if config.patch == 0 || config.stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
    }
    if config.patch > dims[0] || config.patch > dims[1] {
        return Err(Error::InvalidArgument(format!(
            "patch {} larger than slice {}×{}",
            config.patch, dims[0], dims[1]
        )));
    }
    Ok(())
}

/// Every window position over every slice of every source, subsampled
/// uniformly without replacement to `target_count` when there are more.
/// The result is sorted by coordinate.
pub fn plan_patches(source_dims: &[[usize; 3]], config: &PatchConfig, seed: u64) -> Result<Vec<PatchCoord>> {
    let mut coords = Vec::new();
    for (source, &dims) in source_dims.iter().enumerate() {
        check_geometry(dims, config)?;
        let rows = grid_count(dims[1], config.patch, config.stride);
        let cols = grid_count(dims[0], config.patch, config.stride);
        for slice in 0..dims[2] {
            for r in 0..rows {
                for c in 0..cols {
                    coords.push(PatchCoord {
                        source,
                        slice,
                        row: r * config.stride,
                        col: c * config.stride,
                    });
                }
            }
        }
    }
    if coords.len() > config.target_count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, coords.len(), config.target_count).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }
    Ok(coords)
}

/// Crops the sample at `coord` (its `source` field is ignored).
pub fn crop_sample(noisy: &Volume, clean: &Volume, coord: PatchCoord, patch: usize, level_percent: f64) -> Result<PatchSample> {
    noisy.same_shape(clean, "crop_sample")?;
    let [nx, ny, nz] = noisy.dims();
    if coord.slice >= nz || coord.row + patch > ny || coord.col + patch > nx {
        return Err(Error::InvalidArgument(format!("patch at {coord:?} leaves the volume")));
    }
    let channels = stack_slices(nz, coord.slice);
    let mut stack = Vec::with_capacity(patch * patch * STACK_DEPTH);
    let mut clean_center = Vec::with_capacity(patch * patch);
    let mut noisy_center = Vec::with_capacity(patch * patch);
    for y in coord.row..coord.row + patch {
        for x in coord.col..coord.col + patch {
            stack.extend(channels.iter().map(|&z| noisy.get(x, y, z)));
            clean_center.push(clean.get(x, y, coord.slice));
            noisy_center.push(noisy.get(x, y, coord.slice));
        }
    }
    Ok(PatchSample {
        noisy_stack: Tensor::from_vec(&[patch, patch, STACK_DEPTH], stack)?,
        clean_center: Tensor::from_vec(&[patch, patch], clean_center)?,
        noisy_center: Tensor::from_vec(&[patch, patch], noisy_center)?,
        level_percent,
    })
}

/// Sliding-window patches from one noisy/clean pair.
pub fn extract_patches(
    noisy: &Volume,
    clean: &Volume,
    config: &PatchConfig,
    level_percent: f64,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    noisy.same_shape(clean, "extract_patches")?;
    plan_patches(&[clean.dims()], config, seed)?
        .into_iter()
        .map(|c| crop_sample(noisy, clean, c, config.patch, level_percent))
        .collect()
}

/// Seed of the noise realisation for one (volume, level) copy.
fn copy_seed(seed: u64, volume: usize, level: usize) -> u64 {
    let mut z = seed ^ ((volume as u64) << 32 | level as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Planned training set: sources are `volume × level` copies in
/// volume-major order; returns each kept coordinate with its level.
pub fn plan_training_set(
    volume_dims: &[[usize; 3]],
    regime: &Regime,
    config: &PatchConfig,
    seed: u64,
) -> Result<Vec<(PatchCoord, f64)>> {
    if volume_dims.is_empty() {
        return Err(Error::InvalidArgument("no training volumes".into()));
    }
    regime.validate()?;
    let levels = regime.levels();
    let sources: Vec<[usize; 3]> = volume_dims
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d, levels.len()))
        .collect();
    Ok(plan_patches(&sources, config, seed)?
        .into_iter()
        .map(|c| (c, levels[c.source % levels.len()]))
        .collect())
}

/// Noises every clean volume once per regime level, pools the patches of all
/// copies and subsamples them to `config.target_count`.
///
/// Noise levels are relative to each clean volume's maximum intensity. Each
/// noisy copy is then min–max normalized by its own range, exactly as
/// [`crate::network::denoise_volume`] treats its input, and the clean target is
/// mapped through the same affine transform.
pub fn build_training_set(
    clean_volumes: &[Volume],
    regime: &Regime,
    config: &PatchConfig,
    seed: u64,
) -> Result<Vec<PatchSample>> {
    let dims: Vec<_> = clean_volumes.iter().map(Volume::dims).collect();
    let plan = plan_training_set(&dims, regime, config, seed)?;
    let n_levels = regime.levels().len();

    let mut samples = Vec::with_capacity(plan.len());
    let mut current: Option<(usize, Volume, Volume)> = None;
    for (coord, level) in plan {
        let vol = coord.source / n_levels;
        if current.as_ref().map(|(s, _, _)| *s) != Some(coord.source) {
            let clean = &clean_volumes[vol];
            let noise = NoiseLevel::for_volume(level, clean)?;
            let noisy = add_rician(clean, noise, copy_seed(seed, vol, coord.source % n_levels))?.normalize()?;
            let scale = noisy.intensity_scale.expect("set by normalize");
            current = Some((coord.source, noisy, clean.normalize_like(scale)?));
        }
        let (_, noisy, clean) = current.as_ref().expect("noisy copy prepared");
        samples.push(crop_sample(noisy, clean, coord, config.patch, level)?);
    }
    Ok(samples)
}

/// Stacks samples into network input `[B, P, P, 5]` and the noisy/clean centre
/// targets `[B, P, P, 1]`, all multiplied by [`NETWORK_SCALE`].
pub fn assemble_batch(samples: &[&PatchSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let shape = first.noisy_stack.shape().to_vec();
    let (p, q) = (shape[0], shape[1]);
    let mut input = Vec::with_capacity(samples.len() * first.noisy_stack.len());
    let mut noisy = Vec::with_capacity(samples.len() * p * q);
    let mut clean = Vec::with_capacity(samples.len() * p * q);
    for s in samples {
        if s.noisy_stack.shape() != shape.as_slice() {
            return Err(Error::shape("assemble_batch", &shape, s.noisy_stack.shape()));
        }
        input.extend(s.noisy_stack.data().iter().map(|v| v * NETWORK_SCALE));
        noisy.extend(s.noisy_center.data().iter().map(|v| v * NETWORK_SCALE));
        clean.extend(s.clean_center.data().iter().map(|v| v * NETWORK_SCALE));
    }
    let b = samples.len();
    Ok((
        Tensor::from_vec(&[b, p, q, shape[2]], input)?,
        Tensor::from_vec(&[b, p, q, 1], noisy)?,
        Tensor::from_vec(&[b, p, q, 1], clean)?,
    ))
}

pub const PATCH_CACHE_FORMAT: &str = "mcdncnn-patches";

/// JSON sidecar of a patch cache. Each record in the binary file is
/// `level_percent`, the `[P, P, 5]` noisy stack, then the `[P, P]` clean
/// centre, all little-endian float32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCacheHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub patch: usize,
    pub channels: usize,
    pub record_floats: usize,
}

pub fn write_patch_cache(samples: &[PatchSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let patch = samples.first().map_or(PATCH_SIZE, |s| s.clean_center.shape()[0]);
    let header = PatchCacheHeader {
        format: PATCH_CACHE_FORMAT.into(),
        version: 1,
        count: samples.len(),
        patch,
        channels: STACK_DEPTH,
        record_floats: 1 + patch * patch * (STACK_DEPTH + 1),
    };
    let mut floats = Vec::with_capacity(samples.len() * header.record_floats);
    for s in samples {
        if s.noisy_stack.shape() != [patch, patch, STACK_DEPTH] {
            return Err(Error::shape("write_patch_cache", &[patch, patch, STACK_DEPTH], s.noisy_stack.shape()));
        }
        floats.push(s.level_percent as f32);
        floats.extend_from_slice(s.noisy_stack.data());
        floats.extend_from_slice(s.clean_center.data());
    }
    let mut bytes = vec![0u8; floats.len() * 4];
    LittleEndian::write_f32_into(&floats, &mut bytes);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    fs::write(&sidecar, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&sidecar, e))
}

pub fn read_patch_cache(path: impl AsRef<Path>) -> Result<Vec<PatchSample>> {
    let path = path.as_ref();
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let header: PatchCacheHeader = serde_json::from_str(&text)?;
    let p = header.patch;
    if header.format != PATCH_CACHE_FORMAT
        || header.version != 1
        || header.channels != STACK_DEPTH
        || header.record_floats != 1 + p * p * (STACK_DEPTH + 1)
    {
        return Err(Error::PatchCache(format!("unsupported header {header:?}")));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.count * header.record_floats * 4 {
        return Err(Error::PatchCache(format!(
            "expected {} bytes, found {}",
            header.count * header.record_floats * 4,
            bytes.len()
        )));
    }
    let mut floats = vec![0f32; bytes.len() / 4];
    LittleEndian::read_f32_into(&bytes, &mut floats);
    floats
        .chunks_exact(header.record_floats.max(1))
        .map(|rec| {
            let stack = Tensor::from_vec(&[p, p, STACK_DEPTH], rec[1..1 + p * p * STACK_DEPTH].to_vec())?;
            let noisy_center = stack.data().iter().skip(CENTER_CHANNEL).step_by(STACK_DEPTH).copied().collect();
            Ok(PatchSample {
                clean_center: Tensor::from_vec(&[p, p], rec[1 + p * p * STACK_DEPTH..].to_vec())?,
                noisy_center: Tensor::from_vec(&[p, p], noisy_center)?,
                noisy_stack: stack,
                level_percent: rec[0] as f64,
            })
        })
        .collect()
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Voxel value encodes its own (x, y, z) coordinate.
    fn coordinate_volume(dims: [usize; 3]) -> Volume {
        let mut v = Volume::zeros(dims).unwrap();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = v.index(x, y, z);
                    v.voxels_mut()[i] = (x + 1000 * y + 1_000_000 * z) as f32;
                }
            }
        }
        v
    }

    fn decode(v: f32) -> (usize, usize, usize) {
        let v = v as usize;
        (v % 1000, (v / 1000) % 1000, v / 1_000_000)
    }

    #[test]
    fn stack_channels() {
        assert_eq!(stack_slices(10, 5), [3, 4, 5, 6, 7]);
        assert_eq!(stack_slices(10, 0), [0, 0, 0, 1, 2]);
        assert_eq!(stack_slices(10, 9), [7, 8, 9, 9, 9]);
        assert_eq!(stack_slices(1, 0), [0; 5]);

        let v = coordinate_volume([4, 3, 6]);
        let stack = make_stack(&v, 1).unwrap();
        assert_eq!(stack.shape(), [3, 4, 5]);
        // pixel (y=2, x=3)
        let px = &stack.data()[(2 * 4 + 3) * 5..][..5];
        let zs: Vec<_> = px.iter().map(|&p| decode(p)).collect();
        assert_eq!(zs, [(3, 2, 0), (3, 2, 0), (3, 2, 1), (3, 2, 2), (3, 2, 3)]);
        assert!(make_stack(&v, 6).is_err());

        let single = Volume::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = make_stack(&single, 0).unwrap();
        for px in s.data().chunks(5) {
            assert!(px.iter().all(|&c| c == px[0]));
        }
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(grid_count(120, 60, 30), 3);
        assert_eq!(grid_count(60, 60, 7), 1);
        assert_eq!(grid_count(59, 60, 1), 0);
        let cfg = PatchConfig {
            patch: 60,
            stride: 30,
            target_count: usize::MAX,
        };
        assert_eq!(plan_patches(&[[120, 120, 1]], &cfg, 0).unwrap().len(), 9);
        let cfg = PatchConfig { stride: 13, ..cfg };
        assert_eq!(plan_patches(&[[60, 60, 1]], &cfg, 0).unwrap().len(), 1);
        assert!(plan_patches(&[[59, 80, 1]], &cfg, 0).is_err());
    }

    #[test]
    fn crops_come_from_identical_coordinates() {
        let clean = coordinate_volume([9, 8, 4]);
        let noisy = clean.clone();
        let cfg = PatchConfig {
            patch: 4,
            stride: 2,
            target_count: 20,
        };
        let coords = plan_patches(&[clean.dims()], &cfg, 5).unwrap();
        let samples = extract_patches(&noisy, &clean, &cfg, 9.0, 5).unwrap();
        assert_eq!(samples.len(), 20);
        for (c, s) in coords.iter().zip(&samples) {
            for (i, (&cc, &nc)) in s.clean_center.data().iter().zip(s.noisy_center.data()).enumerate() {
                let (x, y, z) = decode(cc);
                assert_eq!((x, y, z), (c.col + i % 4, c.row + i / 4, c.slice));
                assert_eq!(cc, nc);
                assert_eq!(s.noisy_stack.data()[i * 5 + CENTER_CHANNEL], nc);
            }
        }
    }

    #[test]
    fn regimes_and_determinism() {
        let vols: Vec<Volume> = (0..2)
            .map(|i| Volume::new([8, 8, 3], (0..192).map(|j| ((j * 7 + i) % 50) as f32).collect()).unwrap())
            .collect();
        let cfg = PatchConfig {
            patch: 6,
            stride: 1,
            target_count: 40,
        };
        let specific = build_training_set(&vols, &Regime::Specific(9.0), &cfg, 3).unwrap();
        assert_eq!(specific.len(), 40);
        assert!(specific.iter().all(|s| s.level_percent == 9.0));
        assert_eq!(specific, build_training_set(&vols, &Regime::Specific(9.0), &cfg, 3).unwrap());

        let general = build_training_set(&vols, &Regime::general(), &cfg, 3).unwrap();
        assert_eq!(general.len(), 40);
        assert!(build_training_set(&[], &Regime::general(), &cfg, 3).is_err());
        assert!(build_training_set(&vols, &Regime::General(vec![]), &cfg, 3).is_err());
    }

    #[test]
    fn patch_cache_round_trip() {
        let clean = coordinate_volume([6, 6, 2]);
        let cfg = PatchConfig {
            patch: 4,
            stride: 2,
            target_count: 100,
        };
        let samples = extract_patches(&clean, &clean, &cfg, 5.0, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patches.bin");
        write_patch_cache(&samples, &path).unwrap();
        assert_eq!(read_patch_cache(&path).unwrap(), samples);
    }
}
