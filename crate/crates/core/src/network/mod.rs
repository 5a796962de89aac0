//! The multi-channel residual denoiser: a plain stack of 3×3 convolutions
//! that predicts the noise map of the centre slice of a 5-slice input.
//!
//! Layout for depth `D`: one conv+ReLU input layer, `D − 2` conv+BN+ReLU
//! middle layers and a bare conv output layer. There is no pooling, so the
//! prediction has the spatial size of the input.

mod denoise;
mod io;

pub use denoise::{denoise_stack, denoise_volume};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gradcheck::sign_pattern;
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, batchnorm_infer, conv2d_mc_backward, conv2d_mc_forward, relu_backward,
    relu_forward, BatchNormCache, BatchNormParams, ConvParams, Mode, Real, Tensor, KERNEL_SIZE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub width: usize,
    pub depth: usize,
    pub out_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 5,
            width: 64,
            depth: 10,
            out_channels: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::InvalidArgument(format!(
                "depth must be at least 3 (input, middle and output layers), got {}",
                self.depth
            )));
        }
        if self.width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "width and channel counts must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    ConvRelu,
    ConvBnRelu,
    Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f32> {
    pub conv: ConvParams<T>,
    pub bn: Option<BatchNormParams<T>>,
    pub relu: bool,
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match (self.bn.is_some(), self.relu) {
            (true, _) => LayerKind::ConvBnRelu,
            (false, true) => LayerKind::ConvRelu,
            (false, false) => LayerKind::Conv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
}

/// Saved activations of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    mode: Mode,
    /// Input of each layer's convolution. For `i > 0` this is also the ReLU
    /// output of layer `i − 1`, whose sign pattern is the ReLU mask.
    inputs: Vec<Tensor<T>>,
    bn: Vec<Option<BatchNormCache<T>>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Fingerprint of every ReLU mask in the pass.
    pub fn activation_pattern(&self) -> u64 {
        sign_pattern(self.inputs.iter().skip(1).flat_map(|t| t.data().iter().map(|v| v.f64())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T = f32> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Real> Gradients<T> {
    /// Flat view in the order of [`Model::params`].
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.kernels);
            out.push(&l.bias);
            out.extend(l.gamma.iter());
            out.extend(l.beta.iter());
        }
        out
    }
}

/// Builds the layer stack with fan-in scaled normal kernels
/// (`std = sqrt(2 / (9·Cin))`), zero biases and identity batch norm.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        let cin = if i == 0 { config.in_channels } else { config.width };
        let cout = if i + 1 == config.depth { config.out_channels } else { config.width };
        let fan_in = (KERNEL_SIZE * KERNEL_SIZE * cin) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite std");
        let mut conv = ConvParams::zeros(cout, cin);
        for w in conv.kernels.data_mut() {
            *w = normal.sample(&mut rng);
        }
        let middle = i > 0 && i + 1 < config.depth;
        layers.push(Layer {
            conv,
            bn: middle.then(|| BatchNormParams::new(cout)),
            relu: i + 1 < config.depth,
        });
    }
    Ok(Model { config, layers })
}

impl<T: Real> Model<T> {
    /// Assembles a model from explicit layers, checking the input/middle/output layout.
    pub fn from_layers(config: ModelConfig, layers: Vec<Layer<T>>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.depth {
            return Err(Error::InvalidArgument(format!(
                "expected {} layers, got {}",
                config.depth,
                layers.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            let cin = if i == 0 { config.in_channels } else { config.width };
            let cout = if i + 1 == config.depth { config.out_channels } else { config.width };
            let kind = match i {
                0 => LayerKind::ConvRelu,
                _ if i + 1 == config.depth => LayerKind::Conv,
                _ => LayerKind::ConvBnRelu,
            };
            if layer.kind() != kind
                || layer.conv.in_channels() != cin
                || layer.conv.out_channels() != cout
                || layer.bn.as_ref().is_some_and(|bn| bn.channels() != cout)
            {
                return Err(Error::InvalidArgument(format!("layer {i} does not match {config:?}")));
            }
        }
        Ok(Model { config, layers })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// The same model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    conv: l.conv.cast(),
                    bn: l.bn.as_ref().map(BatchNormParams::cast),
                    relu: l.relu,
                })
                .collect(),
        }
    }

    /// Trainable tensors: kernels, bias and (for middle layers) gamma, beta.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.conv.kernels);
            out.push(&l.conv.bias);
            if let Some(bn) = &l.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.conv.kernels);
            out.push(&mut l.conv.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Trainable parameters plus batch-norm running statistics.
    pub fn state_count(&self) -> usize {
        self.parameter_count()
            + self
                .layers
                .iter()
                .filter_map(|l| l.bn.as_ref())
                .map(|bn| bn.running_mean.len() + bn.running_var.len())
                .sum::<usize>()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let (n, h, w, c) = input.dims4("Model::forward")?;
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "Model::forward",
                expected: vec![n, h, w, self.config.in_channels],
                actual: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Predicts the residual (noise map) for `input` `[N, H, W, Cin]`.
    ///
    /// Train mode uses batch statistics and updates the running statistics;
    /// infer mode leaves the model untouched.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut bn_caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            let mut y = conv2d_mc_forward(&x, &layer.conv)?;
            inputs.push(x);
            let mut bn_cache = None;
            if let Some(bn) = &mut layer.bn {
                let (out, cache) = batchnorm_forward(&y, bn, mode)?;
                y = out;
                bn_cache = cache;
            }
            bn_caches.push(bn_cache);
            if layer.relu {
                y = relu_forward(&y);
            }
            x = y;
        }
        Ok((
            x,
            ForwardCache {
                mode,
                inputs,
                bn: bn_caches,
            },
        ))
    }

    /// Inference-mode forward pass without a cache.
    pub fn forward_infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            let mut y = conv2d_mc_forward(&x, &layer.conv)?;
            if let Some(bn) = &layer.bn {
                y = batchnorm_infer(&y, bn)?;
            }
            if layer.relu {
                y = relu_forward(&y);
            }
            x = y;
        }
        Ok(x)
    }

    /// Backpropagates `loss_gradient` (gradient w.r.t. the prediction) through
    /// a train-mode pass.
    pub fn backward(&self, cache: &ForwardCache<T>, loss_gradient: &Tensor<T>) -> Result<Gradients<T>> {
        if cache.mode != Mode::Train {
            return Err(Error::InferenceCache);
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::InvalidArgument("cache does not belong to this model".into()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = loss_gradient.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.relu {
                let out = cache
                    .inputs
                    .get(i + 1)
                    .ok_or_else(|| Error::InvalidArgument("ReLU on the output layer".into()))?;
                g = relu_backward(out, &g)?;
            }
            let (mut gamma, mut beta) = (None, None);
            if layer.bn.is_some() {
                let bn_cache = cache.bn[i]
                    .as_ref()
                    .ok_or(Error::InferenceCache)?;
                let bg = batchnorm_backward(bn_cache, &g)?;
                g = bg.input;
                gamma = Some(bg.gamma);
                beta = Some(bg.beta);
            }
            let cg = conv2d_mc_backward(&cache.inputs[i], &layer.conv, &g)?;
            g = cg.input;
            grads.push(LayerGrads {
                kernels: cg.kernels,
                bias: cg.bias,
                gamma,
                beta,
            });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

/// Value and prediction-gradient of the residual loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T = f32> {
    pub value: f64,
    pub gradient_wrt_prediction: Tensor<T>,
}

/// `(1 / 2N) · Σ ‖prediction − (noisy − clean)‖²` over a batch of `N`, with
/// gradient `(prediction − (noisy − clean)) / N`.
pub fn loss_residual<T: Real>(prediction: &Tensor<T>, noisy_center: &Tensor<T>, clean_center: &Tensor<T>) -> Result<LossValue<T>> {
    prediction.ensure_same_shape(noisy_center, "loss_residual")?;
    prediction.ensure_same_shape(clean_center, "loss_residual")?;
    let n = prediction.shape().first().copied().unwrap_or(1) as f64;
    let mut sum = 0.0f64;
    let mut grad = prediction.clone();
    for ((g, &y), &x) in grad
        .data_mut()
        .iter_mut()
        .zip(noisy_center.data())
        .zip(clean_center.data())
    {
        // the target is formed in working precision so that predicting it
        // exactly gives a zero loss
        let diff = g.f64() - (y - x).f64();
        sum += diff * diff;
        *g = T::of(diff / n);
    }
    Ok(LossValue {
        value: sum / (2.0 * n),
        gradient_wrt_prediction: grad,
    })
}
