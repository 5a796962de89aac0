use super::{Mode, Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Per-channel scale/shift plus the running statistics used at inference.
///
/// Running statistics follow `running ← (1 − momentum)·running + momentum·batch`,
/// where the batch variance is the population variance used for normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Real> BatchNormParams<T> {
    /// Identity affine (gamma 1, beta 0) with running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: T::of(BN_EPS as f64),
            momentum: T::of(BN_MOMENTUM as f64),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Real>(&self) -> BatchNormParams<U> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            eps: U::of(self.eps.f64()),
            momentum: U::of(self.momentum.f64()),
        }
    }

    fn check(&self, input: &Tensor<T>, op: &'static str) -> Result<usize> {
        let (n, h, w, c) = input.dims4(op)?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                op,
                expected: vec![n, h, w, self.channels()],
                actual: input.shape().to_vec(),
            });
        }
        if !(self.eps > T::zero()) {
            return Err(Error::InvalidArgument(format!("batchnorm eps must be > 0, got {:?}", self.eps)));
        }
        Ok(c)
    }
}

/// Values saved by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T = f32> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Batch normalization over the `(N, H, W)` axes of an `[N, H, W, C]` tensor.
///
/// Train mode normalizes by batch statistics, updates the running statistics
/// in `params` and returns a cache for [`batchnorm_backward`]. Infer mode
/// normalizes by the running statistics, leaves `params` untouched and
/// returns no cache.
pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    match mode {
        Mode::Infer => Ok((batchnorm_infer(input, params)?, None)),
        Mode::Train => {
            let (out, cache) = batchnorm_train(input, params)?;
            Ok((out, Some(cache)))
        }
    }
}

/// Inference-mode normalization by running statistics.
pub fn batchnorm_infer<T: Real>(input: &Tensor<T>, params: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let c = params.check(input, "batchnorm_forward")?;
    let (scale, shift): (Vec<T>, Vec<T>) = (0..c)
        .map(|ch| {
            let inv_std = 1.0 / (params.running_var.data()[ch].f64() + params.eps.f64()).sqrt();
            let s = params.gamma.data()[ch].f64() * inv_std;
            let t = params.beta.data()[ch].f64() - params.running_mean.data()[ch].f64() * s;
            (T::of(s), T::of(t))
        })
        .unzip();
    let mut out = input.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for ((v, &s), &t) in px.iter_mut().zip(&scale).zip(&shift) {
            *v = *v * s + t;
        }
    }
    Ok(out)
}

fn batchnorm_train<T: Real>(input: &Tensor<T>, params: &mut BatchNormParams<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = params.check(input, "batchnorm_forward")?;
    let count = input.len() / c;
    if count < 2 {
        return Err(Error::DegenerateBatch {
            op: "batchnorm_forward",
            count,
        });
    }

    let mut mean = vec![0.0f64; c];
    for px in input.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);

    let mut var = vec![0.0f64; c];
    for px in input.data().chunks_exact(c) {
        for ((s, &v), m) in var.iter_mut().zip(px).zip(&mean) {
            let d = v.f64() - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= count as f64);

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::of(1.0 / (v + params.eps.f64()).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();

    let mut normalized = input.clone();
    let mut out = input.clone();
    let gamma = params.gamma.data();
    let beta = params.beta.data();
    for (xn, y) in normalized
        .data_mut()
        .chunks_exact_mut(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let h = (xn[ch] - mean_t[ch]) * inv_std[ch];
            xn[ch] = h;
            y[ch] = gamma[ch] * h + beta[ch];
        }
    }

    let momentum = params.momentum.f64();
    for ch in 0..c {
        let rm = &mut params.running_mean.data_mut()[ch];
        *rm = T::of((1.0 - momentum) * rm.f64() + momentum * mean[ch]);
        let rv = &mut params.running_var.data_mut()[ch];
        *rv = T::of((1.0 - momentum) * rv.f64() + momentum * var[ch]);
    }

    let cache = BatchNormCache {
        normalized,
        inv_std,
        gamma: params.gamma.data().to_vec(),
    };
    Ok((out, cache))
}

/// Exact gradients of train-mode batch normalization, including the
/// dependence of the batch mean and variance on every input element.
pub fn batchnorm_backward<T: Real>(cache: &BatchNormCache<T>, grad_out: &Tensor<T>) -> Result<BatchNormGrads<T>> {
    cache
        .normalized
        .ensure_same_shape(grad_out, "batchnorm_backward")?;
    let c = cache.gamma.len();
    let count = (grad_out.len() / c) as f64;

    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (g, xn) in grad_out
        .data()
        .chunks_exact(c)
        .zip(cache.normalized.data().chunks_exact(c))
    {
        for ch in 0..c {
            sum_g[ch] += g[ch].f64();
            sum_gx[ch] += g[ch].f64() * xn[ch].f64();
        }
    }

    // dx = gamma·inv_std · (g − mean(g) − x̂·mean(g·x̂))
    let scale: Vec<T> = (0..c).map(|ch| cache.gamma[ch] * cache.inv_std[ch]).collect();
    let mean_g: Vec<T> = sum_g.iter().map(|&s| T::of(s / count)).collect();
    let mean_gx: Vec<T> = sum_gx.iter().map(|&s| T::of(s / count)).collect();
    let mut grad_input = grad_out.clone();
    for (dx, xn) in grad_input
        .data_mut()
        .chunks_exact_mut(c)
        .zip(cache.normalized.data().chunks_exact(c))
    {
        for ch in 0..c {
            dx[ch] = scale[ch] * (dx[ch] - mean_g[ch] - xn[ch] * mean_gx[ch]);
        }
    }

    Ok(BatchNormGrads {
        input: grad_input,
        gamma: Tensor::from_vec(&[c], sum_gx.into_iter().map(T::of).collect())?,
        beta: Tensor::from_vec(&[c], sum_g.into_iter().map(T::of).collect())?,
    })
}
