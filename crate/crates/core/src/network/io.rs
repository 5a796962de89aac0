//! Binary model files.
//!
//! Layout (all integers u32 and reals f32, little-endian):
//!
//! ```text
//! "MCDN" | version | depth | width | in_channels | out_channels
//! per layer: kernels | bias | [gamma | beta | running_mean | running_var | eps | momentum]
//! ```
//!
//! Each tensor blob is its element count followed by the values; the
//! bracketed part is present for batch-normalized middle layers only.

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Layer, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormParams, ConvParams, Tensor, KERNEL_SIZE};

pub const MODEL_MAGIC: &[u8; 4] = b"MCDN";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    let cfg = model.config();
    for v in [MODEL_FORMAT_VERSION, cfg.depth as u32, cfg.width as u32, cfg.in_channels as u32, cfg.out_channels as u32] {
        out.write_u32::<LittleEndian>(v).expect("write to Vec");
    }
    let blob = |out: &mut Vec<u8>, t: &Tensor| {
        out.write_u32::<LittleEndian>(t.len() as u32).expect("write to Vec");
        for &v in t.data() {
            out.write_f32::<LittleEndian>(v).expect("write to Vec");
        }
    };
    for layer in model.layers() {
        blob(&mut out, &layer.conv.kernels);
        blob(&mut out, &layer.conv.bias);
        if let Some(bn) = &layer.bn {
            for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                blob(&mut out, t);
            }
            out.write_f32::<LittleEndian>(bn.eps).expect("write to Vec");
            out.write_f32::<LittleEndian>(bn.momentum).expect("write to Vec");
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::ModelFormat {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what} (need {n} bytes, {} left)",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = self.take(4, what)?;
        Ok(b.read_u32::<LittleEndian>().expect("4 bytes"))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let mut b = self.take(4, what)?;
        Ok(b.read_f32::<LittleEndian>().expect("4 bytes"))
    }

    fn tensor(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let at = self.pos;
        let count = self.u32(what)? as usize;
        let expected: usize = shape.iter().product();
        if count != expected {
            return Err(Error::ModelFormat {
                offset: at as u64,
                reason: format!("{what}: expected {expected} values, header says {count}"),
            });
        }
        let raw = self.take(count * 4, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MODEL_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, not a model file"));
    }
    let version = r.u32("version")?;
    if version != MODEL_FORMAT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported format version {version}")));
    }
    let mut dims = [0usize; 4];
    for (d, name) in dims.iter_mut().zip(["depth", "width", "in_channels", "out_channels"]) {
        *d = r.u32(name)? as usize;
    }
    let config = ModelConfig {
        depth: dims[0],
        width: dims[1],
        in_channels: dims[2],
        out_channels: dims[3],
    };
    if let Err(e) = config.validate() {
        r.pos = 8;
        return Err(r.fail(e.to_string()));
    }

    let mut layers = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        let cin = if i == 0 { config.in_channels } else { config.width };
        let cout = if i + 1 == config.depth { config.out_channels } else { config.width };
        let kernels = r.tensor(&[cout, KERNEL_SIZE, KERNEL_SIZE, cin], "kernels")?;
        let bias = r.tensor(&[cout], "bias")?;
        let conv = ConvParams::new(kernels, bias)?;
        let bn = if i > 0 && i + 1 < config.depth {
            let gamma = r.tensor(&[cout], "gamma")?;
            let beta = r.tensor(&[cout], "beta")?;
            let running_mean = r.tensor(&[cout], "running_mean")?;
            let running_var = r.tensor(&[cout], "running_var")?;
            let eps = r.f32("eps")?;
            let momentum = r.f32("momentum")?;
            Some(BatchNormParams {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            })
        } else {
            None
        };
        layers.push(Layer {
            conv,
            bn,
            relu: i + 1 < config.depth,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Model::from_layers(config, layers)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_model;
    use crate::tensor::Mode;

    fn trained_ish() -> Model {
        let mut model = build_model(ModelConfig { width: 4, depth: 4, ..Default::default() }, 9).unwrap();
        let input = crate::gradcheck::random_tensor(&[2, 6, 6, 5], 1, 3.0);
        model.forward(&input, Mode::Train).unwrap();
        model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = trained_ish();
        let bytes = model_to_bytes(&model);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        let input = crate::gradcheck::random_tensor(&[1, 7, 5, 5], 2, 1.0);
        let a = model.forward_infer(&input).unwrap();
        let b = back.forward_infer(&input).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = model_to_bytes(&trained_ish());
        for cut in [0, 3, 10, 30, bytes.len() - 1] {
            match model_from_bytes(&bytes[..cut]) {
                Err(Error::ModelFormat { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("expected a format error at cut {cut}, got {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(model_from_bytes(&bad), Err(Error::ModelFormat { offset: 0, .. })));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 7;
        assert!(matches!(model_from_bytes(&wrong_version), Err(Error::ModelFormat { offset: 4, .. })));

        let mut extra = bytes;
        extra.push(0);
        assert!(model_from_bytes(&extra).is_err());
    }
}
