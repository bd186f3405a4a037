use std::ops::Range;

use rand::Rng as _;

use super::layer::{infer_shapes, Activation, LayerKind, LayerSpec, ModelPreset};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_INPUT_SIZE: usize = 64;

/// Architecture description accepted by [`Model::build`].
#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Preset(ModelPreset),
    Layers(Vec<LayerSpec>),
}

impl From<ModelPreset> for Architecture {
    fn from(p: ModelPreset) -> Self {
        Architecture::Preset(p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// A sequential CNN over `B×3×S×S` inputs producing `B×C` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
    /// For each layer, the index of its weight parameter (bias follows).
    slots: Vec<Option<usize>>,
    tap_index: usize,
    num_classes: usize,
    input_size: usize,
}

/// Handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub tap: Var,
    pub params: Vec<Var>,
}

impl Model {
    /// Builds a model with He-uniform weights (`U(±√(6/fan_in))`) drawn from
    /// the seeded init stream, in layer order, and zero biases.
    pub fn build(arch: impl Into<Architecture>, num_classes: usize, input_size: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, Stream::Init, 0);
        Self::assemble(arch.into(), num_classes, input_size, |shape, fan_in, is_bias| {
            let n: usize = shape.iter().product();
            let data = if is_bias {
                vec![0.0; n]
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            Tensor::new(shape.to_vec(), data)
        })
    }

    /// Builds a model with externally supplied parameter tensors in
    /// canonical order (per parameterised layer: weight, then bias).
    pub fn from_parts(layers: Vec<LayerSpec>, num_classes: usize, input_size: usize, tensors: Vec<Tensor>) -> Result<Self> {
        let mut supplied = tensors.into_iter();
        let model = Self::assemble(Architecture::Layers(layers), num_classes, input_size, |shape, _, _| {
            let t = supplied
                .next()
                .ok_or_else(|| Error::Format("fewer parameter tensors than layers require".into()))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "parameter shape {:?} does not match expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t)
        })?;
        if supplied.next().is_some() {
            return Err(Error::Format("more parameter tensors than layers require".into()));
        }
        Ok(model)
    }

    /// The same layers and parameters applied to `input_size` inputs.
    pub fn with_input_size(&self, input_size: usize) -> Result<Self> {
        infer_shapes(&self.layers, input_size, self.num_classes)?;
        Ok(Self {
            input_size,
            ..self.clone()
        })
    }

    fn assemble(
        arch: Architecture,
        num_classes: usize,
        input_size: usize,
        mut make: impl FnMut(&[usize], usize, bool) -> Result<Tensor>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        let layers = match arch {
            Architecture::Preset(p) => p.layers(num_classes),
            Architecture::Layers(l) => l,
        };
        infer_shapes(&layers, input_size, num_classes)?;
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let shapes = match layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => Some((
                    vec![out_channels, in_channels, kernel, kernel],
                    out_channels,
                    in_channels * kernel * kernel,
                )),
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => Some((vec![out_features, in_features], out_features, in_features)),
                _ => None,
            };
            match shapes {
                Some((wshape, nbias, fan_in)) => {
                    slots.push(Some(params.len()));
                    params.push(Param {
                        name: format!("layer{i}.weight"),
                        tensor: make(&wshape, fan_in, false)?,
                    });
                    params.push(Param {
                        name: format!("layer{i}.bias"),
                        tensor: make(&[nbias], fan_in, true)?,
                    });
                }
                None => slots.push(None),
            }
        }
        let tap_index = layers
            .iter()
            .position(|l| l.feature_tap)
            .expect("infer_shapes guarantees one tap");
        Ok(Self {
            layers,
            params,
            slots,
            tap_index,
            num_classes,
            input_size,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn tap_index(&self) -> usize {
        self.tap_index
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Shape of the feature-tap activation for one image: `(K, m, n)`.
    pub fn tap_shape(&self) -> (usize, usize, usize) {
        let shapes = infer_shapes(&self.layers, self.input_size, self.num_classes).expect("validated at build");
        match shapes[self.tap_index] {
            Activation::Spatial {
                channels,
                height,
                width,
            } => (channels, height, width),
            Activation::Flat(_) => unreachable!("tap is spatial"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Multiply-add count convention: `2·Cout·Cin·k²·H'·W'` per conv plus
    /// `2·M·N` per dense layer, for one `size×size` image.
    pub fn flop_estimate(&self, input_size: usize) -> Result<u64> {
        let shapes = infer_shapes(&self.layers, input_size, self.num_classes)?;
        let mut flops = 0u64;
        for (layer, act) in self.layers.iter().zip(&shapes) {
            match (layer.kind, act) {
                (
                    LayerKind::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    },
                    Activation::Spatial { height, width, .. },
                ) => {
                    flops += 2 * (out_channels * in_channels * kernel * kernel * height * width) as u64;
                }
                (
                    LayerKind::Dense {
                        in_features,
                        out_features,
                    },
                    _,
                ) => flops += 2 * (out_features * in_features) as u64,
                _ => {}
            }
        }
        Ok(flops)
    }

    /// Places the parameters on `tape`, as leaves when `record` is set and as
    /// constants otherwise.
    pub fn register_params(&self, tape: &mut Tape, record: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| {
                if record {
                    tape.leaf(&p.tensor)
                } else {
                    tape.constant(&p.tensor)
                }
            })
            .collect()
    }

    /// Runs the full network. With `record` set, backward through `logits`
    /// yields parameter gradients (see [`Model::store_grads`]).
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, record: bool) -> Result<Forward> {
        self.check_input(images.shape())?;
        let params = self.register_params(tape, record)?;
        let x = tape.constant(images)?;
        let (logits, tap) = self.run_layers(tape, x, &params, 0..self.layers.len())?;
        Ok(Forward {
            logits,
            tap: tap.expect("tap lies inside the full range"),
            params,
        })
    }

    /// Runs only the layers after the feature tap, starting from `tap`.
    pub fn forward_from_tap(&self, tape: &mut Tape, tap: Var, params: &[Var]) -> Result<Var> {
        let (out, _) = self.run_layers(tape, tap, params, self.tap_index + 1..self.layers.len())?;
        Ok(out)
    }

    /// Runs layers up to and including the feature tap.
    pub fn forward_to_tap(&self, tape: &mut Tape, images: &Tensor, params: &[Var]) -> Result<Var> {
        self.check_input(images.shape())?;
        let x = tape.constant(images)?;
        let (out, _) = self.run_layers(tape, x, params, 0..self.tap_index + 1)?;
        Ok(out)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.input_size;
        match shape {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(Error::shape(format!(
                "model expects B×3×{s}×{s} images, got {other:?}"
            ))),
        }
    }

    fn run_layers(&self, tape: &mut Tape, mut x: Var, params: &[Var], range: Range<usize>) -> Result<(Var, Option<Var>)> {
        if params.len() != self.params.len() {
            return Err(Error::contract("parameter handles do not match model"));
        }
        let mut tap = None;
        for i in range {
            let layer = &self.layers[i];
            x = match layer.kind {
                LayerKind::Conv { stride, padding, .. } => {
                    let w = self.slots[i].expect("conv has params");
                    tape.conv2d(x, params[w], params[w + 1], stride, padding)?
                }
                LayerKind::Relu => tape.relu(x)?,
                LayerKind::MaxPool { window } => tape.maxpool2d(x, window)?,
                LayerKind::GlobalAvgPool => tape.global_avg_pool(x)?,
                LayerKind::Dense { .. } => {
                    let w = self.slots[i].expect("dense has params");
                    tape.dense(x, params[w], params[w + 1])?
                }
                LayerKind::SigmoidHead => x,
            };
            if i == self.tap_index {
                tap = Some(x);
            }
        }
        Ok((x, tap))
    }

    /// Copies gradients from a consumed tape into each parameter's grad slot.
    /// Parameters the root did not reach get zero gradients.
    pub fn store_grads(&mut self, tape: &Tape, forward: &Forward) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(&forward.params) {
            let g = match tape.grad(*v)? {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.tensor.numel()],
            };
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }

    /// Logits for a batch, computed without keeping a tape.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, false)?;
        tape.tensor(out.logits)
    }

    /// Sigmoid probabilities for a batch.
    pub fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        let logits = self.predict_logits(images)?;
        let shape = logits.shape().to_vec();
        let probs = logits.into_data().into_iter().map(crate::tensor::sigmoid).collect();
        Tensor::new(shape, probs)
    }

    /// Raw little-endian bytes of every parameter, in canonical order.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}
