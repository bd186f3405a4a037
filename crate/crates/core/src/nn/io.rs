//! Binary model file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "KDM1"                          4 bytes
//! version = 1                     u32
//! layer count L                   u32
//! L × { kind u8, hp u32 × 6 }     kind bit 7 marks the feature tap
//! param-tensor count P            u32
//! P × { rank u32, dims u32 × rank, data f64 × Π dims }
//! ```
//!
//! Kind codes and hyperparameter slots:
//!
//! | code | layer        | hp[0..5]                                   |
//! |------|--------------|--------------------------------------------|
//! | 0    | conv         | in, out, kernel, stride, padding           |
//! | 1    | relu         | -                                          |
//! | 2    | maxpool      | window                                     |
//! | 3    | global avg   | -                                          |
//! | 4    | dense        | in, out                                    |
//! | 5    | sigmoid head | -                                          |
//!
//! `hp[5]` of every layer holds the square spatial extent of that layer's
//! input (0 once activations are flat); the first layer's value is the
//! model's input size.

use std::fs;
use std::path::Path;

use super::layer::{infer_shapes, Activation, LayerKind, LayerSpec};
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KDM1";
pub const VERSION: u32 = 1;
const TAP_BIT: u8 = 0x80;
pub const DESCRIPTOR_BYTES: usize = 1 + 6 * 4;
/// Magic, version and layer count.
pub const HEADER_BYTES: usize = 4 + 4 + 4;

pub fn encode(model: &Model) -> Vec<u8> {
    let shapes = infer_shapes(model.layers(), model.input_size(), model.num_classes()).expect("model was validated");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, model.layers().len() as u32);
    let mut extent = model.input_size();
    for (layer, act) in model.layers().iter().zip(&shapes) {
        let (code, hp) = match layer.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => (0u8, [in_channels, out_channels, kernel, stride, padding]),
            LayerKind::Relu => (1, [0; 5]),
            LayerKind::MaxPool { window } => (2, [window, 0, 0, 0, 0]),
            LayerKind::GlobalAvgPool => (3, [0; 5]),
            LayerKind::Dense {
                in_features,
                out_features,
            } => (4, [in_features, out_features, 0, 0, 0]),
            LayerKind::SigmoidHead => (5, [0; 5]),
        };
        out.push(if layer.feature_tap { code | TAP_BIT } else { code });
        for v in hp {
            put_u32(&mut out, v as u32);
        }
        put_u32(&mut out, extent as u32);
        extent = match act {
            Activation::Spatial { height, .. } => *height,
            Activation::Flat(_) => 0,
        };
    }
    put_u32(&mut out, model.params().len() as u32);
    for p in model.params() {
        let t = &p.tensor;
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a KDM1 model file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model file version {version}")));
    }
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    let mut input_size = None;
    for i in 0..n_layers {
        let kind_byte = r.u8()?;
        let mut hp = [0usize; 6];
        for v in &mut hp {
            *v = r.u32()? as usize;
        }
        if i == 0 {
            input_size = Some(hp[5]);
        }
        let kind = match kind_byte & !TAP_BIT {
            0 => LayerKind::Conv {
                in_channels: hp[0],
                out_channels: hp[1],
                kernel: hp[2],
                stride: hp[3],
                padding: hp[4],
            },
            1 => LayerKind::Relu,
            2 => LayerKind::MaxPool { window: hp[0] },
            3 => LayerKind::GlobalAvgPool,
            4 => LayerKind::Dense {
                in_features: hp[0],
                out_features: hp[1],
            },
            5 => LayerKind::SigmoidHead,
            other => return Err(Error::Format(format!("unknown layer kind {other} at layer {i}"))),
        };
        layers.push(LayerSpec {
            kind,
            feature_tap: kind_byte & TAP_BIT != 0,
        });
    }
    let input_size = input_size.ok_or_else(|| Error::Format("model has no layers".into()))?;
    let num_classes = output_width(&layers)?;

    let n_params = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_params.min(1024));
    for _ in 0..n_params {
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after model payload",
            bytes.len() - r.pos
        )));
    }
    let model = Model::from_parts(layers, num_classes, input_size, tensors).map_err(|e| match e {
        Error::Shape(m) => Error::Format(format!("inconsistent architecture: {m}")),
        other => other,
    })?;
    // The recorded per-layer extents must agree with the rebuilt model.
    if encode(&model) != bytes {
        return Err(Error::Format("layer extents disagree with architecture".into()));
    }
    Ok(model)
}

fn output_width(layers: &[LayerSpec]) -> Result<usize> {
    layers
        .iter()
        .rev()
        .find_map(|l| match l.kind {
            LayerKind::Dense { out_features, .. } => Some(out_features),
            _ => None,
        })
        .ok_or_else(|| Error::Format("model has no dense head".into()))
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Serialized size of `model` in bytes.
pub fn encoded_len(model: &Model) -> usize {
    HEADER_BYTES
        + model.layers().len() * DESCRIPTOR_BYTES
        + 4
        + model
            .params()
            .iter()
            .map(|p| 4 + 4 * p.tensor.rank() + 8 * p.tensor.numel())
            .sum::<usize>()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated model file at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
