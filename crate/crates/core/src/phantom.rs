//! Synthetic head-like phantoms: nested soft-edged ellipsoids at graded
//! intensities plus a few random inclusions, on the 0–255 scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{Volume, INTENSITY_PEAK};

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Intensity change inside the ellipsoid relative to its surroundings.
    delta: f64,
}

impl Ellipsoid {
    /// Soft membership in `[0, 1]` with an edge width of ~1.5 voxels.
    fn membership(&self, p: [f64; 3]) -> f64 {
        let r2: f64 = (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum();
        let dist = (r2.sqrt() - 1.0) * self.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        1.0 / (1.0 + (dist / 0.75).exp())
    }
}

/// Builds a phantom of the given dims; the seed jitters every shape, so
/// different seeds give distinct but similar volumes. The maximum intensity is
/// 255 and the background is 0.
pub fn phantom(dims: [usize; 3], seed: u64) -> Result<Volume> {
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::InvalidArgument(format!("phantom dims must be at least 8, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = dims.map(|d| d as f64);
    let mid = size.map(|s| (s - 1.0) / 2.0);
    let mut jitter = |scale: f64| 1.0 + rng.random_range(-scale..scale);

    let mut shapes = Vec::new();
    let head = [0.46 * size[0] * jitter(0.04), 0.47 * size[1] * jitter(0.04), 0.47 * size[2] * jitter(0.04)];
    let center = [mid[0] * jitter(0.03), mid[1] * jitter(0.03), mid[2]];
    // scalp, skull, brain, white matter
    for (shrink, delta) in [(1.0, 0.45), (0.9, -0.3), (0.82, 0.45), (0.6, 0.25)] {
        shapes.push(Ellipsoid {
            center,
            radii: head.map(|r| r * shrink),
            delta,
        });
    }
    // ventricles
    for side in [-1.0, 1.0] {
        shapes.push(Ellipsoid {
            center: [center[0] + side * 0.12 * head[0] * jitter(0.2), center[1] * jitter(0.05), center[2]],
            radii: [0.09 * head[0] * jitter(0.2), 0.28 * head[1] * jitter(0.15), 0.3 * head[2] * jitter(0.15)],
            delta: -0.55,
        });
    }
    // graded inclusions inside the brain
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for k in 0..6 {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let reach = rng.random_range(0.2..0.55);
        let radius = rng.random_range(0.06..0.14) * head[0];
        shapes.push(Ellipsoid {
            center: [
                center[0] + reach * head[0] * angle.cos(),
                center[1] + reach * head[1] * angle.sin(),
                center[2] + rng.random_range(-0.3..0.3) * head[2],
            ],
            radii: [radius, radius * rng.random_range(0.7..1.3), radius * rng.random_range(0.7..1.3)],
            delta: [-0.3, -0.15, 0.1, 0.2, -0.2, 0.15][k],
        });
    }
    let ripple_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut voxels = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let mut v: f64 = shapes.iter().map(|s| s.delta * s.membership(p)).sum();
                // gentle texture inside tissue
                let ripple = 0.04 * ((p[0] * 0.45 + ripple_phase).sin() * (p[1] * 0.35).cos() + (p[2] * 0.5).sin());
                v *= 1.0 + ripple;
                voxels.push(v.max(0.0));
            }
        }
    }
    let max = voxels.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(Error::InvalidArgument("phantom has no foreground".into()));
    }
    let scale = INTENSITY_PEAK as f64 / max;
    Volume::new(dims, voxels.into_iter().map(|v| (v * scale) as f32).collect())
}
