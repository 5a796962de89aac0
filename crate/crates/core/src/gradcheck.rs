//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates a scalar objective at perturbed points, so
//! it stays independent of the backward code it verifies. Analytic gradients
//! come from the precision under test; the objective (a random linear
//! projection of a primitive's output, or the training loss) is always
//! evaluated with the forward map in 64-bit, so the reference derivative is
//! not swamped by 32-bit rounding of the forward pass.
//!
//! An entry passes when `|a − n| ≤ tol · max(|a|, |n|, floor)`, where the
//! floor is [`FLOOR_FRACTION`] of the largest gradient magnitude in the
//! tensor (or in the whole model, for end-to-end checks). Without it, entries whose true value is exactly zero (a bias
//! feeding batch normalization) could never pass at finite precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

/// Finite-difference step for checks of 32-bit gradients.
pub const FD_STEP: f64 = 1e-3;
/// Step for the 64-bit mode, small enough that truncation error stays well
/// below its tolerance.
pub const FD_STEP_F64: f64 = 1e-4;
/// Tolerance for checks run in `f32`.
pub const REL_TOLERANCE_F32: f64 = 1e-2;
/// Tolerance for checks run in `f64`.
pub const REL_TOLERANCE_F64: f64 = 1e-5;
pub const FLOOR_FRACTION: f64 = 1e-3;

/// One evaluation of the objective.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub loss: f64,
    /// Fingerprint of any non-differentiable state (ReLU masks). A
    /// perturbation that changes it has crossed a kink.
    pub pattern: u64,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose perturbation crossed a kink even at a reduced step.
    pub skipped: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// `(index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} entries, max rel err {:.3e} (tol {:.0e})",
            self.name, self.checked, self.max_rel_error, self.tolerance
        )?;
        if self.skipped > 0 {
            write!(f, ", {} skipped at kinks", self.skipped)?;
        }
        if let Some((i, a, n)) = self.worst {
            write!(f, ", worst #{i}: analytic {a:.6e} numeric {n:.6e}")?;
        }
        Ok(())
    }
}

fn is_single<T: Real>() -> bool {
    T::epsilon().f64() > 1e-10
}

/// Tolerance matching the working precision `T`.
pub fn tolerance_for<T: Real>() -> f64 {
    if is_single::<T>() {
        REL_TOLERANCE_F32
    } else {
        REL_TOLERANCE_F64
    }
}

/// Finite-difference step matching the working precision `T`.
pub fn step_for<T: Real>() -> f64 {
    if is_single::<T>() {
        FD_STEP
    } else {
        FD_STEP_F64
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor).max(f64::MIN_POSITIVE)
}

/// Compares `analytic` (computed in precision `T`) against central
/// differences of the 64-bit objective `eval` around `point`.
///
/// If either side of a perturbation changes the probe pattern the step is
/// shrunk tenfold once; entries that still straddle a kink are skipped.
pub fn check<T: Real>(
    name: impl Into<String>,
    point: &[T],
    analytic: &[T],
    eval: impl FnMut(&[f64]) -> Probe,
) -> GradCheck {
    check_scaled(name, point, analytic, 0.0, eval)
}

/// [`check`] with the error floor taken relative to at least `scale`, for
/// tensors that are one part of a larger gradient (the whole model's).
pub fn check_scaled<T: Real>(
    name: impl Into<String>,
    point: &[T],
    analytic: &[T],
    scale: f64,
    mut eval: impl FnMut(&[f64]) -> Probe,
) -> GradCheck {
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let tolerance = tolerance_for::<T>();
    let step = step_for::<T>();
    let point: Vec<f64> = point.iter().map(|v| v.f64()).collect();
    let base = eval(&point);
    let mut x = point.clone();
    let mut numeric = Vec::with_capacity(point.len());
    let mut skipped = 0;
    for i in 0..point.len() {
        let mut value = None;
        for h in [step, step / 10.0] {
            x[i] = point[i] + h;
            let plus = eval(&x);
            x[i] = point[i] - h;
            let minus = eval(&x);
            x[i] = point[i];
            if plus.pattern == base.pattern && minus.pattern == base.pattern {
                value = Some((plus.loss - minus.loss) / (2.0 * h));
                break;
            }
        }
        if value.is_none() {
            skipped += 1;
        }
        numeric.push(value);
    }

    let scale = analytic
        .iter()
        .map(|a| a.f64().abs())
        .chain(numeric.iter().flatten().map(|n| n.abs()))
        .fold(scale, f64::max);
    let mut report = GradCheck {
        name: name.into(),
        checked: 0,
        skipped,
        tolerance,
        max_rel_error: 0.0,
        worst: None,
    };
    for (i, n) in numeric.iter().enumerate() {
        let Some(n) = *n else { continue };
        let a = analytic[i].f64();
        let err = relative_error(a, n, FLOOR_FRACTION * scale);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((i, a, n));
        }
    }
    report
}

/// Random projection weights in `[-1, 1)`.
pub fn projection<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    random_tensor(shape, seed, 1.0)
}

/// `Σ w·y` accumulated in 64-bit, as a smooth probe.
pub fn project<T: Real>(output: &Tensor<T>, weights: &Tensor<T>) -> Probe {
    Probe {
        loss: output.data().iter().zip(weights.data()).map(|(&o, &w)| o.f64() * w.f64()).sum(),
        pattern: 0,
    }
}

/// Fingerprint of the sign pattern of `values` (bit set where value > 0).
pub fn sign_pattern(values: impl IntoIterator<Item = f64>) -> u64 {
    // FNV-1a over the mask bits
    values.into_iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ u64::from(v > 0.0)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Uniform values in `[-scale, scale)` from a seeded ChaCha8 stream; the same
/// seed gives the same values (up to rounding) in every precision.
pub fn random_tensor<T: Real>(shape: &[usize], seed: u64, scale: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(rng.random_range(-scale..scale))).collect())
        .expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: &[f64]) -> Probe {
        Probe {
            loss: x.iter().map(|v| v * v).sum::<f64>(),
            pattern: 0,
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        let point = [0.5f32, -1.0];
        assert!(check("sq", &point, &[1.0, -2.0], square).passed());
        assert!(!check("sq", &point, &[1.0, 2.0], square).passed());
        assert!(!check("sq", &[0.5f64, -1.0], &[1.0, -2.0001], square).passed());
    }

    #[test]
    fn skips_kinks() {
        let f = |x: &[f64]| Probe {
            loss: x[0].abs(),
            pattern: sign_pattern(x.iter().copied()),
        };
        let report = check("abs", &[1e-6f64], &[1.0], f);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 0);
        assert!(!report.passed());
    }

    #[test]
    fn precision_settings() {
        assert_eq!(tolerance_for::<f32>(), 1e-2);
        assert_eq!(tolerance_for::<f64>(), 1e-5);
        assert_eq!(step_for::<f32>(), 1e-3);
        assert_eq!(step_for::<f64>(), 1e-4);
    }
}
