use super::Model;
use crate::datapipe::{make_stack, NETWORK_SCALE, STACK_DEPTH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{Volume, INTENSITY_PEAK};

/// Clean estimate of the centre slice: `centre − predicted residual`.
pub fn denoise_stack(model: &Model, stack: &Tensor) -> Result<Tensor> {
    let (_, h, w, c) = stack.dims4("denoise_stack")?;
    let cfg = model.config();
    if c != cfg.in_channels {
        return Err(Error::shape("denoise_stack", &[1, h, w, cfg.in_channels], stack.shape()));
    }
    if cfg.out_channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "denoising needs a single-channel residual, model emits {}",
            cfg.out_channels
        )));
    }
    if h < 3 || w < 3 {
        return Err(Error::InvalidArgument(format!("slice {h}×{w} smaller than 3×3")));
    }
    let prediction = model.forward_infer(stack)?;
    let mut out = stack.channel(c / 2)?;
    for (o, r) in out.data_mut().iter_mut().zip(prediction.data()) {
        *o -= r;
    }
    Ok(out)
}

/// Denoises every axial slice of `volume` from its 5-slice stack.
///
/// The network runs on the volume normalized to 0–255 and multiplied by
/// [`NETWORK_SCALE`], as in training; the predicted residual is mapped back to
/// the original intensity units and subtracted from the original voxels, so a
/// zero residual reproduces the input exactly.
pub fn denoise_volume(model: &Model, volume: &Volume) -> Result<Volume> {
    let cfg = model.config();
    if cfg.in_channels != STACK_DEPTH || cfg.out_channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "volume denoising needs a {STACK_DEPTH}-in, 1-out model, got {}-in, {}-out",
            cfg.in_channels, cfg.out_channels
        )));
    }
    let normalized = volume.normalize()?;
    let scale = normalized.intensity_scale.expect("set by normalize");
    // network units → original intensity units
    let unit = (scale.max - scale.min) / INTENSITY_PEAK / NETWORK_SCALE;
    let [nx, ny, nz] = volume.dims();
    let plane = nx * ny;
    let mut out = volume.clone();
    for z in 0..nz {
        let stack = make_stack(&normalized, z)?
            .map(|v| v * NETWORK_SCALE)
            .reshape(&[1, ny, nx, STACK_DEPTH])?;
        let residual = model.forward_infer(&stack)?;
        let slice = &mut out.voxels_mut()[z * plane..(z + 1) * plane];
        for (o, &r) in slice.iter_mut().zip(residual.data()) {
            *o -= r * unit;
        }
    }
    Ok(out)
}
