//! Volume quality metrics on the 0–255 intensity scale: PSNR and the mean of
//! local SSIM over unweighted 3×3×3 windows.

use crate::error::{Error, Result};
use crate::volume::{Volume, INTENSITY_PEAK};

pub const SSIM_WINDOW: usize = 3;
const WINDOW_VOXELS: usize = SSIM_WINDOW * SSIM_WINDOW * SSIM_WINDOW;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConstants {
    fn default() -> Self {
        let peak = INTENSITY_PEAK as f64;
        SsimConstants {
            c1: (0.01 * peak).powi(2),
            c2: (0.03 * peak).powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    /// `+inf` when the volumes are identical.
    pub psnr_db: f64,
    pub ssim_global: f64,
    pub rmse: f64,
}

pub fn rmse(reference: &Volume, test: &Volume) -> Result<f64> {
    reference.same_shape(test, "rmse")?;
    let sse: f64 = reference
        .voxels()
        .iter()
        .zip(test.voxels())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok((sse / reference.len() as f64).sqrt())
}

pub fn psnr_from_rmse(rmse: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (INTENSITY_PEAK as f64 / rmse).log10()
    }
}

/// `20·log10(255 / RMSE)` in dB; `+inf` for identical volumes.
pub fn psnr(reference: &Volume, test: &Volume) -> Result<f64> {
    Ok(psnr_from_rmse(rmse(reference, test)?))
}

/// SSIM of two complete windows with population (divide-by-n) statistics.
pub fn ssim_local(x: &[f64], y: &[f64], constants: SsimConstants) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    vx /= n;
    vy /= n;
    cov /= n;
    let SsimConstants { c1, c2 } = constants;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean local SSIM over every fully interior 3×3×3 window (stride 1).
pub fn ssim_global(reference: &Volume, test: &Volume, constants: SsimConstants) -> Result<f64> {
    reference.same_shape(test, "ssim_global")?;
    let [nx, ny, nz] = reference.dims();
    if nx < SSIM_WINDOW || ny < SSIM_WINDOW || nz < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs every dimension ≥ 3, got {:?}",
            reference.dims()
        )));
    }
    let (ref_v, test_v) = (reference.voxels(), test.voxels());
    let mut wx = [0.0f64; WINDOW_VOXELS];
    let mut wy = [0.0f64; WINDOW_VOXELS];
    let mut plane_sums = Vec::with_capacity(nz - 2);
    for z in 0..nz - 2 {
        let mut plane = 0.0f64;
        for y in 0..ny - 2 {
            for x in 0..nx - 2 {
                let mut k = 0;
                for dz in 0..SSIM_WINDOW {
                    for dy in 0..SSIM_WINDOW {
                        let row = reference.index(x, y + dy, z + dz);
                        for dx in 0..SSIM_WINDOW {
                            wx[k] = ref_v[row + dx] as f64;
                            wy[k] = test_v[row + dx] as f64;
                            k += 1;
                        }
                    }
                }
                plane += ssim_local(&wx, &wy, constants);
            }
        }
        plane_sums.push(plane);
    }
    let windows = ((nx - 2) * (ny - 2) * (nz - 2)) as f64;
    Ok(pairwise_sum(&plane_sums) / windows)
}

fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

pub fn evaluate(reference: &Volume, test: &Volume, constants: SsimConstants) -> Result<MetricReport> {
    let rmse = rmse(reference, test)?;
    Ok(MetricReport {
        psnr_db: psnr_from_rmse(rmse),
        ssim_global: ssim_global(reference, test, constants)?,
        rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr_from_rmse(255.0), 0.0);
        assert!((psnr_from_rmse(2.55) - 40.0).abs() < 1e-12);
        let v = Volume::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(psnr(&v, &v).unwrap(), f64::INFINITY);
        let shifted = Volume::new([2, 2, 1], vec![3.55, 4.55, 5.55, 6.55]).unwrap();
        assert!((psnr(&v, &shifted).unwrap() - 40.0).abs() < 1e-5);
        assert!(psnr(&v, &Volume::zeros([4, 1, 1]).unwrap()).is_err());
    }

    #[test]
    fn constant_windows() {
        let c = SsimConstants::default();
        let (a, b) = (40.0, 90.0);
        let got = ssim_local(&[a; 27], &[b; 27], c);
        let expected = (2.0 * a * b + c.c1) / (a * a + b * b + c.c1);
        assert!((got - expected).abs() < 1e-12);
        let w: Vec<f64> = (0..27).map(|i| (i * i % 17) as f64).collect();
        assert!((ssim_local(&w, &w, c) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn small_volumes_rejected() {
        let v = Volume::zeros([3, 3, 2]).unwrap();
        assert!(ssim_global(&v, &v, SsimConstants::default()).is_err());
    }
}
