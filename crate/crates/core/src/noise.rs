//! Rician noise: the magnitude of a complex signal whose real and imaginary
//! channels carry independent zero-mean Gaussian noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Voxels per independent generator stream. Chunk `i` uses ChaCha8 stream `i`
/// of the seed, so any chunk can be generated without the others.
const STREAM_CHUNK: usize = 4096;

/// Evaluation sweep: 1% to 15% in steps of 2%.
pub fn noise_sweep_levels() -> Vec<f64> {
    (0..8).map(|i| 1.0 + 2.0 * i as f64).collect()
}

/// Noise level as a percentage of a reference intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub percent: f64,
    pub sigma: f64,
}

impl NoiseLevel {
    pub fn new(percent: f64, reference_intensity: f64) -> Result<Self> {
        if !(percent > 0.0 && percent <= 100.0) {
            return Err(Error::InvalidArgument(format!(
                "noise level must be in (0, 100] percent, got {percent}"
            )));
        }
        if !(reference_intensity > 0.0 && reference_intensity.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reference intensity must be positive, got {reference_intensity}"
            )));
        }
        Ok(NoiseLevel {
            percent,
            sigma: percent / 100.0 * reference_intensity,
        })
    }

    /// Level relative to the maximum intensity of the noise-free `volume`.
    pub fn for_volume(percent: f64, volume: &Volume) -> Result<Self> {
        Self::new(percent, volume.min_max().1 as f64)
    }

    /// A level given directly by its standard deviation; `percent` is left at 0.
    pub fn from_sigma(sigma: f64) -> Self {
        NoiseLevel { percent: 0.0, sigma }
    }
}

/// Standard normal pair from two uniforms by the Box–Muller transform.
fn box_muller(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Corrupts every voxel as `sqrt((x + n1)² + n2²)` with `n1, n2 ~ N(0, σ²)`.
///
/// Deterministic in `seed`: each run of 4096 voxels draws from its own
/// ChaCha8 stream (stream index = chunk index), two 64-bit draws per voxel.
pub fn add_rician(volume: &Volume, level: NoiseLevel, seed: u64) -> Result<Volume> {
    if !(level.sigma > 0.0 && level.sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be positive, got {}",
            level.sigma
        )));
    }
    if let Some(v) = volume.voxels().iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "Rician corruption needs non-negative intensities, found {v}"
        )));
    }
    let sigma = level.sigma;
    let mut out = volume.clone();
    for (chunk, voxels) in out.voxels_mut().chunks_mut(STREAM_CHUNK).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk as u64);
        for v in voxels {
            let (n1, n2) = box_muller(&mut rng);
            let re = *v as f64 + sigma * n1;
            let im = sigma * n2;
            *v = re.hypot(im) as f32;
        }
    }
    Ok(out)
}
