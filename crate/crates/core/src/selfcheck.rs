//! Built-in verification suite: finite-difference checks of every backward
//! pass and brute-force checks of the metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{check, check_scaled, project, projection, random_tensor, sign_pattern, GradCheck, Probe};
use crate::metrics::{psnr, ssim_global, ssim_local, SsimConstants};
use crate::network::{build_model, loss_residual, Model, ModelConfig};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, conv2d_mc_backward, conv2d_mc_forward, relu_backward, relu_forward,
    BatchNormParams, ConvParams, Mode, Real, Tensor,
};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfcheckOptions {
    /// Random cases per primitive.
    pub cases: usize,
    /// Test hook: perturbs the analytic conv kernel gradient before comparing.
    pub corrupt_conv_kernel_grad: bool,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions {
            cases: 20,
            corrupt_conv_kernel_grad: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Random `[N, H, W, C]` shape with `N ≤ 2`, `H, W ≤ 6`, `C ≤ 4`.
fn small_shape(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.random_range(1..=2), rng.random_range(2..=6), rng.random_range(2..=6), rng.random_range(1..=4)]
}

fn with_data(t: &Tensor<f64>, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), v.to_vec()).expect("same length")
}

pub fn conv_gradients<T: Real>(shape: [usize; 4], out_channels: usize, seed: u64, corrupt: bool) -> Vec<GradCheck> {
    let input = random_tensor::<T>(&shape, seed, 1.0);
    let params = ConvParams::new(
        random_tensor(&[out_channels, 3, 3, shape[3]], seed + 1, 0.5),
        random_tensor(&[out_channels], seed + 2, 0.5),
    )
    .expect("valid conv shapes");
    let out_shape = [shape[0], shape[1], shape[2], out_channels];
    let weights = projection::<T>(&out_shape, seed + 3);
    let mut grads = conv2d_mc_backward(&input, &params, &weights).expect("shapes agree");
    if corrupt {
        grads.kernels.data_mut()[0] += T::of(0.5);
    }

    let (x64, p64, w64) = (input.cast::<f64>(), params.cast::<f64>(), weights.cast::<f64>());
    let objective = |x: &Tensor<f64>, p: &ConvParams<f64>| project(&conv2d_mc_forward(x, p).expect("shapes agree"), &w64);
    vec![
        check("conv input", input.data(), grads.input.data(), |v| objective(&with_data(&x64, v), &p64)),
        check("conv kernels", params.kernels.data(), grads.kernels.data(), |v| {
            let mut p = p64.clone();
            p.kernels.data_mut().copy_from_slice(v);
            objective(&x64, &p)
        }),
        check("conv bias", params.bias.data(), grads.bias.data(), |v| {
            let mut p = p64.clone();
            p.bias.data_mut().copy_from_slice(v);
            objective(&x64, &p)
        }),
    ]
}

pub fn batchnorm_gradients<T: Real>(shape: [usize; 4], seed: u64) -> Vec<GradCheck> {
    let input = random_tensor::<T>(&shape, seed, 2.0);
    let c = shape[3];
    let mut params = BatchNormParams::<T>::new(c);
    params.gamma = random_tensor(&[c], seed + 1, 1.5);
    params.beta = random_tensor(&[c], seed + 2, 1.0);
    let weights = projection::<T>(&shape, seed + 3);
    let (_, cache) = batchnorm_forward(&input, &mut params.clone(), Mode::Train).expect("non-degenerate batch");
    let grads = batchnorm_backward(&cache.expect("train cache"), &weights).expect("shapes agree");

    let (x64, p64, w64) = (input.cast::<f64>(), params.cast::<f64>(), weights.cast::<f64>());
    let objective = |x: &Tensor<f64>, p: &BatchNormParams<f64>| {
        let (y, _) = batchnorm_forward(x, &mut p.clone(), Mode::Train).expect("non-degenerate batch");
        project(&y, &w64)
    };
    vec![
        check("batchnorm input", input.data(), grads.input.data(), |v| objective(&with_data(&x64, v), &p64)),
        check("batchnorm gamma", params.gamma.data(), grads.gamma.data(), |v| {
            let mut p = p64.clone();
            p.gamma.data_mut().copy_from_slice(v);
            objective(&x64, &p)
        }),
        check("batchnorm beta", params.beta.data(), grads.beta.data(), |v| {
            let mut p = p64.clone();
            p.beta.data_mut().copy_from_slice(v);
            objective(&x64, &p)
        }),
    ]
}

pub fn relu_gradients<T: Real>(shape: [usize; 4], seed: u64) -> GradCheck {
    let input = random_tensor::<T>(&shape, seed, 1.0);
    let weights = projection::<T>(&shape, seed + 1);
    let grad = relu_backward(&input, &weights).expect("shapes agree");
    let (x64, w64) = (input.cast::<f64>(), weights.cast::<f64>());
    check("relu input", input.data(), grad.data(), |v| Probe {
        pattern: sign_pattern(v.iter().copied()),
        ..project(&relu_forward(&with_data(&x64, v)), &w64)
    })
}

/// End-to-end check of `loss_residual ∘ forward` for a depth-3, width-2 model
/// on a `1×6×6×5` batch, one report per parameter tensor.
pub fn model_gradients<T: Real>(seed: u64) -> Vec<GradCheck> {
    let config = ModelConfig {
        in_channels: 5,
        width: 2,
        depth: 3,
        out_channels: 1,
    };
    let mut model = build_model(config, seed).expect("valid config").cast::<T>();
    // move batch-norm affine parameters off their identity initialization
    for layer in model.layers_mut() {
        if let Some(bn) = &mut layer.bn {
            bn.gamma = random_tensor::<T>(&[config.width], seed + 7, 1.0).map(|g| g + T::of(1.5));
            bn.beta = random_tensor(&[config.width], seed + 8, 0.5);
        }
        layer.conv.bias = random_tensor(layer.conv.bias.shape(), seed + 9, 0.2);
    }
    let input = random_tensor::<T>(&[1, 6, 6, 5], seed + 1, 1.0);
    let noisy = random_tensor::<T>(&[1, 6, 6, 1], seed + 2, 1.0);
    let clean = random_tensor::<T>(&[1, 6, 6, 1], seed + 3, 1.0);

    let (pred, cache) = model.clone().forward(&input, Mode::Train).expect("valid shapes");
    let loss = loss_residual(&pred, &noisy, &clean).expect("valid shapes");
    let grads = model.backward(&cache, &loss.gradient_wrt_prediction).expect("train cache");
    let grad_tensors: Vec<Tensor<T>> = grads.tensors().into_iter().cloned().collect();

    let scale = grad_tensors
        .iter()
        .flat_map(|g| g.data().iter().map(|v| v.f64().abs()))
        .fold(0.0, f64::max);
    let model64 = model.cast::<f64>();
    let (input64, noisy64, clean64) = (input.cast::<f64>(), noisy.cast::<f64>(), clean.cast::<f64>());
    let evaluate = |m: &Model<f64>| {
        let (pred, cache) = m.clone().forward(&input64, Mode::Train).expect("valid shapes");
        Probe {
            loss: loss_residual(&pred, &noisy64, &clean64).expect("valid shapes").value,
            pattern: cache.activation_pattern(),
        }
    };

    (0..grad_tensors.len())
        .map(|k| {
            let param = model.params()[k];
            let name = format!("model param #{k} {:?}", param.shape());
            check_scaled(name, param.data(), grad_tensors[k].data(), scale, |v| {
                let mut m = model64.clone();
                m.params_mut()[k].data_mut().copy_from_slice(v);
                evaluate(&m)
            })
        })
        .collect()
}

/// Direct-loop SSIM over all interior windows, written independently of
/// [`ssim_global`].
pub fn brute_force_ssim(a: &Volume, b: &Volume, c: SsimConstants) -> f64 {
    let [nx, ny, nz] = a.dims();
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 1..nz - 1 {
        for y in 1..ny - 1 {
            for x in 1..nx - 1 {
                let mut xs = Vec::with_capacity(27);
                let mut ys = Vec::with_capacity(27);
                for k in z - 1..=z + 1 {
                    for j in y - 1..=y + 1 {
                        for i in x - 1..=x + 1 {
                            xs.push(a.get(i, j, k) as f64);
                            ys.push(b.get(i, j, k) as f64);
                        }
                    }
                }
                let mean = |v: &[f64]| v.iter().sum::<f64>() / 27.0;
                let (mx, my) = (mean(&xs), mean(&ys));
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / 27.0;
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / 27.0;
                let cov = xs.iter().zip(&ys).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / 27.0;
                total += (2.0 * mx * my + c.c1) * (2.0 * cov + c.c2) / ((mx * mx + my * my + c.c1) * (vx + vy + c.c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn brute_force_psnr(a: &Volume, b: &Volume) -> f64 {
    let mut sse = 0.0;
    for (p, q) in a.voxels().iter().zip(b.voxels()) {
        sse += (*p as f64 - *q as f64) * (*p as f64 - *q as f64);
    }
    let rmse = (sse / a.len() as f64).sqrt();
    20.0 * (255.0 / rmse).log10()
}

fn random_volume(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Volume {
    let n = dims.iter().product();
    Volume::new(dims, (0..n).map(|_| rng.random_range(0.0f32..255.0)).collect()).expect("valid dims")
}

fn summarize(name: &str, reports: &[GradCheck]) -> CheckOutcome {
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one report");
    let failed: Vec<&GradCheck> = reports.iter().filter(|r| !r.passed()).collect();
    CheckOutcome {
        name: name.to_string(),
        passed: failed.is_empty(),
        detail: match failed.first() {
            Some(f) => format!("{} of {} checks failed; first: {f}", failed.len(), reports.len()),
            None => format!("{} checks, worst {worst}", reports.len()),
        },
    }
}

/// Finite-difference checks of every primitive and of the whole model in
/// precision `T`, `options.cases` random cases each.
pub fn gradient_suite<T: Real>(rng: &mut ChaCha8Rng, options: SelfcheckOptions, label: &str) -> Vec<CheckOutcome> {
    let mut conv = Vec::new();
    let mut bn = Vec::new();
    let mut relu = Vec::new();
    let mut model = Vec::new();
    for case in 0..options.cases as u64 {
        let shape = small_shape(rng);
        let k = rng.random_range(1..=4);
        conv.extend(conv_gradients::<T>(shape, k, 100 + 10 * case, options.corrupt_conv_kernel_grad));
        bn.extend(batchnorm_gradients::<T>(small_shape(rng), 200 + 10 * case));
        relu.push(relu_gradients::<T>(small_shape(rng), 300 + 10 * case));
        model.extend(model_gradients::<T>(400 + 10 * case));
    }
    vec![
        summarize(&format!("conv2d_mc gradients ({label})"), &conv),
        summarize(&format!("batchnorm gradients ({label})"), &bn),
        summarize(&format!("relu gradients ({label})"), &relu),
        summarize(&format!("end-to-end model gradients ({label})"), &model),
    ]
}

/// Runs the whole suite; every outcome must pass.
pub fn run(options: SelfcheckOptions) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut out = gradient_suite::<f32>(&mut rng, options, "32-bit");
    out.extend(gradient_suite::<f64>(&mut rng, options, "64-bit"));

    let c = SsimConstants::default();
    let mut worst_ssim = 0.0f64;
    let mut worst_psnr = 0.0f64;
    for _ in 0..options.cases.max(1) {
        let a = random_volume([5, 5, 5], &mut rng);
        let b = random_volume([5, 5, 5], &mut rng);
        let fast = ssim_global(&a, &b, c).unwrap_or(f64::NAN);
        worst_ssim = worst_ssim.max((fast - brute_force_ssim(&a, &b, c)).abs());
        let p = psnr(&a, &b).unwrap_or(f64::NAN);
        worst_psnr = worst_psnr.max((p - brute_force_psnr(&a, &b)).abs());
    }
    out.push(CheckOutcome {
        name: "ssim_global vs brute force".into(),
        passed: worst_ssim <= 1e-9,
        detail: format!("max |Δ| = {worst_ssim:.3e}"),
    });
    out.push(CheckOutcome {
        name: "psnr vs brute force".into(),
        passed: worst_psnr <= 1e-9,
        detail: format!("max |Δ| = {worst_psnr:.3e}"),
    });

    let w: Vec<f64> = (0..27).map(|i| ((i * 7) % 13) as f64 * 10.0).collect();
    let identical = ssim_local(&w, &w, c);
    let shifted = Volume::new([2, 1, 1], vec![10.0, 20.0]).expect("dims");
    let shifted2 = Volume::new([2, 1, 1], vec![12.55, 22.55]).expect("dims");
    let forty = psnr(&shifted, &shifted2).unwrap_or(f64::NAN);
    out.push(CheckOutcome {
        name: "metric closed forms".into(),
        passed: (identical - 1.0).abs() <= 1e-9 && (forty - 40.0).abs() <= 1e-4,
        detail: format!("SSIM(x, x) = {identical}, PSNR at RMSE 2.55 = {forty:.6} dB"),
    });
    out
}
