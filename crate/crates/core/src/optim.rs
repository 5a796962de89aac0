//! Adam, the per-epoch exponential learning-rate schedule and the mini-batch
//! training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datapipe::{assemble_batch, PatchSample};
use crate::error::{Error, Result};
use crate::network::{loss_residual, Model};
use crate::tensor::{Mode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds the per-epoch shuffle (ChaCha8).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 50,
            lr_start: 1e-1,
            lr_end: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epoch count must be positive".into());
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return bad(format!(
                "need 0 < lr_end ≤ lr_start, got {} → {}",
                self.lr_start, self.lr_end
            ));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("Adam betas must lie in (0, 1): {} {}", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("Adam eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }
}

/// `lr_start · (lr_end / lr_start)^(epoch / (epochs − 1))`, constant within an
/// epoch. The first and last epochs return `lr_start` and `lr_end` exactly.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} out of range for {} epochs",
            config.epochs
        )));
    }
    if epoch == 0 {
        return Ok(config.lr_start);
    }
    if epoch == config.epochs - 1 {
        return Ok(config.lr_end);
    }
    let frac = epoch as f64 / (config.epochs - 1) as f64;
    Ok(config.lr_start * (config.lr_end / config.lr_start).powf(frac))
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} params, {} grads, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        p.ensure_same_shape(g, "adam_step")?;
        p.ensure_same_shape(m, "adam_step")?;
    }

    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + config.adam_eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Owns the optimizer state for one model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub state: AdamState,
}

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            state: AdamState::new(&model.params()),
        })
    }

    /// Forward, loss, backward and one Adam update; returns the batch loss
    /// before the update.
    pub fn step(&mut self, model: &mut Model, input: &Tensor, noisy: &Tensor, clean: &Tensor, lr: f64) -> Result<f64> {
        let (prediction, cache) = model.forward(input, Mode::Train)?;
        let loss = loss_residual(&prediction, noisy, clean)?;
        let grads = model.backward(&cache, &loss.gradient_wrt_prediction)?;
        let grad_refs = grads.tensors();
        adam_step(&mut model.params_mut(), &grad_refs, &mut self.state, lr, &self.config)?;
        Ok(loss.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Trains `model` in place. Each epoch shuffles the sample order with a
/// ChaCha8 generator seeded from `config.seed`, then walks mini-batches of
/// `batch_size` (the last may be shorter). Returns one log entry per epoch.
pub fn train(
    model: &mut Model,
    dataset: &[PatchSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, *config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch)?;
        order.shuffle(&mut rng);
        let mut weighted = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PatchSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (input, noisy, clean) = assemble_batch(&batch)?;
            let loss = trainer.step(model, &input, &noisy, &clean, lr)?;
            weighted += loss * chunk.len() as f64;
        }
        let log = EpochLog {
            epoch,
            lr,
            mean_loss: weighted / dataset.len() as f64,
        };
        on_epoch(&log);
        history.push(log);
    }
    Ok(history)
}

/// Writes the `epoch,lr,mean_loss` CSV log.
pub fn write_loss_csv(history: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)?;
    for row in history {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
