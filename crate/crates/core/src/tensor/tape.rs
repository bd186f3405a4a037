use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node on a [`Tape`].
///
/// A handle is only valid for the tape (and tape generation) that produced it;
/// using it after [`Tape::reset`] or on another tape is a contract error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
    generation: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Relu,
    Sigmoid,
    Log,
    PowConst(f64),
    Scale(f64),
    AddConst(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        geometry: ConvGeometry,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: usize,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Unary {
        input: usize,
        kind: Unary,
    },
    Binary {
        lhs: usize,
        rhs: usize,
        kind: Binary,
    },
    Reduce {
        input: usize,
        kind: Reduction,
        /// For each input dimension, its stride in the output (0 when reduced).
        out_strides: Vec<usize>,
        count: usize,
    },
    Reshape {
        input: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// Single-threaded: a tape and the handles it issues must stay in one
/// context. [`Tape::backward`] consumes the recording; call [`Tape::reset`]
/// before recording the next computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    generation: u64,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            generation: next_generation(),
            consumed: false,
        }
    }

    /// Drops every node and invalidates all previously issued handles.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.generation = next_generation();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, var: Var) -> Result<&Node> {
        if var.generation != self.generation {
            return Err(Error::contract("handle belongs to a different tape or generation"));
        }
        self.nodes
            .get(var.index)
            .ok_or_else(|| Error::contract("handle does not refer to a recorded node"))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::contract("tape already consumed by backward; reset it first"));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        })
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, true)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, tensor: &Tensor) -> Result<Var> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    pub fn shape(&self, var: Var) -> Result<&[usize]> {
        Ok(&self.node(var)?.shape)
    }

    pub fn value(&self, var: Var) -> Result<&[f64]> {
        Ok(&self.node(var)?.value)
    }

    pub fn tensor(&self, var: Var) -> Result<Tensor> {
        let node = self.node(var)?;
        Tensor::new(node.shape.clone(), node.value.clone())
    }

    pub fn item(&self, var: Var) -> Result<f64> {
        match self.value(var)? {
            [v] => Ok(*v),
            other => Err(Error::shape(format!(
                "expected a scalar, node has {} elements",
                other.len()
            ))),
        }
    }

    /// Gradient of the last backward root with respect to `var`, if any
    /// gradient reached it.
    pub fn grad(&self, var: Var) -> Result<Option<&[f64]>> {
        self.node(var)?;
        Ok(self.grads.get(var.index).and_then(|g| g.as_deref()))
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        Ok(self.node(var)?.requires_grad)
    }

    // ---- primitives -------------------------------------------------------

    /// 2-D cross-correlation with zero padding plus a per-channel bias.
    ///
    /// `input` is `B×Cin×H×W`, `kernel` is `Cout×Cin×k×k`, `bias` is `Cout`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, ki, bi) = (self.node(input)?, self.node(kernel)?, self.node(bias)?);
        let (xs, ks, bs) = (&xi.shape, &ki.shape, &bi.shape);
        if xs.len() != 4 || ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::shape(format!(
                "conv2d expects a 4-d input and a square 4-d kernel, got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape(format!(
                "conv2d input has {} channels but kernel expects {}",
                xs[1], ks[1]
            )));
        }
        if bs.as_slice() != [ks[0]] {
            return Err(Error::shape(format!(
                "conv2d bias shape {bs:?} does not match {} output channels",
                ks[0]
            )));
        }
        if stride == 0 {
            return Err(Error::domain("conv2d stride must be positive"));
        }
        let k = ks[2];
        let (ph, pw) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if k == 0 || k > ph || k > pw {
            return Err(Error::domain(format!(
                "conv2d kernel {k} does not fit padded input {ph}×{pw}"
            )));
        }
        let geometry = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ks[0],
            kernel: k,
            stride,
            padding,
            out_height: (ph - k) / stride + 1,
            out_width: (pw - k) / stride + 1,
        };
        if geometry.batch * geometry.out_channels == 0 {
            return Err(Error::domain("conv2d output would be empty"));
        }
        let value = kernels::conv2d_forward(&geometry, &xi.value, &ki.value, &bi.value);
        let requires_grad = xi.requires_grad || ki.requires_grad || bi.requires_grad;
        let shape = vec![
            geometry.batch,
            geometry.out_channels,
            geometry.out_height,
            geometry.out_width,
        ];
        self.push(
            shape,
            value,
            Op::Conv2d {
                input: input.index,
                kernel: kernel.index,
                bias: bias.index,
                geometry,
            },
            requires_grad,
        )
    }

    /// Non-overlapping `window×window` max pooling over the last two axes.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let node = self.node(input)?;
        let s = &node.shape;
        if s.len() != 4 {
            return Err(Error::shape(format!("maxpool2d expects a 4-d input, got {s:?}")));
        }
        if window == 0 || s[2] % window != 0 || s[3] % window != 0 {
            return Err(Error::shape(format!(
                "maxpool2d window {window} does not divide spatial extent {}×{}",
                s[2], s[3]
            )));
        }
        let (value, argmax) = kernels::maxpool_forward(&node.value, s[0] * s[1], s[2], s[3], window);
        let shape = vec![s[0], s[1], s[2] / window, s[3] / window];
        let requires_grad = node.requires_grad;
        self.push(
            shape,
            value,
            Op::MaxPool {
                input: input.index,
                argmax,
            },
            requires_grad,
        )
    }

    /// Mean over the spatial axes: `B×C×H×W → B×C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let node = self.node(input)?;
        let s = &node.shape;
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(format!(
                "global_avg_pool expects a non-empty 4-d input, got {s:?}"
            )));
        }
        let area = s[2] * s[3];
        let z = area as f64;
        let value = node
            .value
            .chunks_exact(area)
            .map(|plane| plane.iter().sum::<f64>() / z)
            .collect();
        let shape = vec![s[0], s[1]];
        let requires_grad = node.requires_grad;
        self.push(shape, value, Op::GlobalAvgPool { input: input.index }, requires_grad)
    }

    /// Affine map `x·Wᵀ + b` with `x: B×N`, `W: M×N`, `b: M`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.node(input)?, self.node(weight)?, self.node(bias)?);
        let (xs, ws, bs) = (&xi.shape, &wi.shape, &bi.shape);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs.as_slice() != [ws[0]] {
            return Err(Error::shape(format!(
                "dense shapes do not agree: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (b, n, m) = (xs[0], xs[1], ws[0]);
        let value = kernels::dense_forward(b, n, m, &xi.value, &wi.value, &bi.value);
        let requires_grad = xi.requires_grad || wi.requires_grad || bi.requires_grad;
        self.push(
            vec![b, m],
            value,
            Op::Dense {
                input: input.index,
                weight: weight.index,
                bias: bias.index,
            },
            requires_grad,
        )
    }

    fn unary(&mut self, input: Var, kind: Unary) -> Result<Var> {
        let node = self.node(input)?;
        if kind == Unary::Log {
            if let Some(bad) = node.value.iter().find(|v| **v <= 0.0 || v.is_nan()) {
                return Err(Error::domain(format!("log of non-positive value {bad}")));
            }
        }
        fn map(src: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
            src.iter().map(|&x| f(x)).collect()
        }
        let value = match kind {
            Unary::Relu => map(&node.value, |x| if x > 0.0 { x } else { 0.0 }),
            Unary::Sigmoid => map(&node.value, sigmoid),
            Unary::Log => map(&node.value, f64::ln),
            Unary::PowConst(p) => map(&node.value, |x| x.powf(p)),
            Unary::Scale(c) => map(&node.value, |x| x * c),
            Unary::AddConst(c) => map(&node.value, |x| x + c),
            Unary::Clamp(lo, hi) => map(&node.value, |x| x.clamp(lo, hi)),
        };
        if value.iter().zip(&node.value).any(|(y, x)| !y.is_finite() && x.is_finite()) {
            return Err(Error::domain(format!(
                "{kind:?} produced a non-finite value from finite input"
            )));
        }
        let (shape, requires_grad) = (node.shape.clone(), node.requires_grad);
        self.push(
            shape,
            value,
            Op::Unary {
                input: input.index,
                kind,
            },
            requires_grad,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    /// Logistic function `1 / (1 + e^{-x})`.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn pow_const(&mut self, x: Var, exponent: f64) -> Result<Var> {
        self.unary(x, Unary::PowConst(exponent))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(factor))
    }

    pub fn add_const(&mut self, x: Var, offset: f64) -> Result<Var> {
        self.unary(x, Unary::AddConst(offset))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was
    /// inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::domain(format!("invalid clamp interval [{lo}, {hi}]")));
        }
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, lhs: Var, rhs: Var, kind: Binary) -> Result<Var> {
        let (a, b) = (self.node(lhs)?, self.node(rhs)?);
        let shape = if a.shape == b.shape || b.value.len() == 1 {
            a.shape.clone()
        } else if a.value.len() == 1 {
            b.shape.clone()
        } else {
            return Err(Error::shape(format!(
                "elementwise operands {:?} and {:?} are neither equal nor scalar",
                a.shape, b.shape
            )));
        };
        let n: usize = shape.iter().product();
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let av = |i: usize| if a.value.len() == 1 { a.value[0] } else { a.value[i] };
        let bv = |i: usize| if b.value.len() == 1 { b.value[0] } else { b.value[i] };
        let value = (0..n).map(|i| f(av(i), bv(i))).collect();
        let requires_grad = a.requires_grad || b.requires_grad;
        self.push(
            shape,
            value,
            Op::Binary {
                lhs: lhs.index,
                rhs: rhs.index,
                kind,
            },
            requires_grad,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    fn reduce(&mut self, input: Var, kind: Reduction, axes: Option<&[usize]>) -> Result<Var> {
        let node = self.node(input)?;
        let rank = node.shape.len();
        let mut reduced = vec![false; rank];
        match axes {
            None => reduced.fill(true),
            Some(axes) => {
                for &a in axes {
                    if a >= rank || reduced[a] {
                        return Err(Error::shape(format!(
                            "invalid or repeated reduction axis {a} for shape {:?}",
                            node.shape
                        )));
                    }
                    reduced[a] = true;
                }
            }
        }
        let count: usize = node
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| **r)
            .map(|(d, _)| *d)
            .product();
        if count == 0 || node.value.is_empty() {
            return Err(Error::domain("reduction over an empty extent"));
        }
        let out_shape: Vec<usize> = node
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, r)| !**r)
            .map(|(d, _)| *d)
            .collect();
        let mut out_strides = vec![0; rank];
        let mut stride = 1;
        for d in (0..rank).rev() {
            if !reduced[d] {
                out_strides[d] = stride;
                stride *= node.shape[d];
            }
        }
        let out_len: usize = out_shape.iter().product();
        let mut value = vec![0.0; out_len];
        for_each_index(&node.shape, &out_strides, |i, o| value[o] += node.value[i]);
        if kind == Reduction::Mean {
            let c = count as f64;
            value.iter_mut().for_each(|v| *v /= c);
        }
        let requires_grad = node.requires_grad;
        self.push(
            out_shape,
            value,
            Op::Reduce {
                input: input.index,
                kind,
                out_strides,
                count,
            },
            requires_grad,
        )
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::Sum, None)
    }

    /// Arithmetic mean of every element, as a rank-0 tensor.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::Mean, None)
    }

    /// Sum over the listed axes, which are removed from the shape.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, Reduction::Sum, Some(axes))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, Reduction::Mean, Some(axes))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let node = self.node(x)?;
        if shape.iter().product::<usize>() != node.value.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                node.shape
            )));
        }
        let (value, requires_grad) = (node.value.clone(), node.requires_grad);
        self.push(shape.to_vec(), value, Op::Reshape { input: x.index }, requires_grad)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar `root`. Gradients stay queryable via
    /// [`Tape::grad`] until the next reset; the tape accepts no further
    /// primitives or backward calls until then.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward called twice on one recording"));
        }
        let node = self.node(root)?;
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Err(Error::contract("backward root does not depend on any differentiable leaf"));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.index] = Some(vec![1.0]);

        for i in (0..=root.index).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let wants = |j: usize| nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let mut gi = wants(input).then(|| take_or_zero(grads, input, nodes[input].value.len()));
                let mut gk = wants(kernel).then(|| take_or_zero(grads, kernel, nodes[kernel].value.len()));
                let mut gb = wants(bias).then(|| take_or_zero(grads, bias, nodes[bias].value.len()));
                kernels::conv2d_backward(
                    geometry,
                    &nodes[input].value,
                    &nodes[kernel].value,
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                restore(grads, input, gi);
                restore(grads, kernel, gk);
                restore(grads, bias, gb);
            }
            Op::MaxPool { input, argmax } => {
                let gi = accum(grads, *input, nodes[*input].value.len());
                for (gv, &src) in g.iter().zip(argmax) {
                    gi[src] += gv;
                }
            }
            Op::GlobalAvgPool { input } => {
                let inode = &nodes[*input];
                let area = inode.shape[2] * inode.shape[3];
                let z = area as f64;
                let gi = accum(grads, *input, inode.value.len());
                for (plane, gv) in gi.chunks_exact_mut(area).zip(g) {
                    let share = gv / z;
                    plane.iter_mut().for_each(|v| *v += share);
                }
            }
            Op::Dense { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let (b, n) = (nodes[input].shape[0], nodes[input].shape[1]);
                let m = nodes[weight].shape[0];
                if wants(input) {
                    let gi = accum(grads, input, b * n);
                    kernels::gemm(b, m, n, g, false, &nodes[weight].value, false, gi, true);
                }
                if wants(weight) {
                    let gw = accum(grads, weight, m * n);
                    kernels::gemm(m, b, n, g, true, &nodes[input].value, false, gw, true);
                }
                if wants(bias) {
                    let gb = accum(grads, bias, m);
                    for row in g.chunks_exact(m) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Unary { input, kind } => {
                let x = &nodes[*input].value;
                let y = &node.value;
                let gi = accum(grads, *input, x.len());
                for k in 0..x.len() {
                    let d = match *kind {
                        Unary::Relu => {
                            if y[k] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => y[k] * (1.0 - y[k]),
                        Unary::Log => 1.0 / x[k],
                        Unary::PowConst(p) => {
                            if p == 0.0 {
                                0.0
                            } else {
                                p * x[k].powf(p - 1.0)
                            }
                        }
                        Unary::Scale(c) => c,
                        Unary::AddConst(_) => 1.0,
                        Unary::Clamp(lo, hi) => {
                            if x[k] >= lo && x[k] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    gi[k] += g[k] * d;
                }
            }
            Op::Binary { lhs, rhs, kind } => {
                let (lhs, rhs) = (*lhs, *rhs);
                let (a, b) = (&nodes[lhs].value, &nodes[rhs].value);
                let at = |v: &[f64], k: usize| if v.len() == 1 { v[0] } else { v[k] };
                let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Binary::Mul => (
                        g.iter().enumerate().map(|(k, v)| v * at(b, k)).collect(),
                        g.iter().enumerate().map(|(k, v)| v * at(a, k)).collect(),
                    ),
                };
                for (j, d) in [(lhs, da), (rhs, db)] {
                    if !wants(j) {
                        continue;
                    }
                    let gj = accum(grads, j, nodes[j].value.len());
                    if gj.len() == d.len() {
                        gj.iter_mut().zip(&d).for_each(|(a, v)| *a += v);
                    } else {
                        gj[0] += d.iter().sum::<f64>();
                    }
                }
            }
            Op::Reduce {
                input,
                kind,
                out_strides,
                count,
            } => {
                let inode = &nodes[*input];
                let scale = match kind {
                    Reduction::Sum => 1.0,
                    Reduction::Mean => 1.0 / *count as f64,
                };
                let gi = accum(grads, *input, inode.value.len());
                for_each_index(&inode.shape, out_strides, |k, o| gi[k] += g[o] * scale);
            }
            Op::Reshape { input } => {
                let gi = accum(grads, *input, g.len());
                gi.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], j: usize, len: usize) -> &mut Vec<f64> {
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

fn take_or_zero(grads: &mut [Option<Vec<f64>>], j: usize, len: usize) -> Vec<f64> {
    grads[j].take().unwrap_or_else(|| vec![0.0; len])
}

fn restore(grads: &mut [Option<Vec<f64>>], j: usize, g: Option<Vec<f64>>) {
    if let Some(g) = g {
        grads[j] = Some(g);
    }
}

/// Calls `f(input_flat, output_flat)` for every element in row-major order.
fn for_each_index(shape: &[usize], out_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut out = 0usize;
    for flat in 0..n {
        f(flat, out);
        for d in (0..rank).rev() {
            idx[d] += 1;
            out += out_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            out -= out_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_conv_returns_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.constant(&t(&[1, 1, 3, 3], &data)).unwrap();
        let k = tape.constant(&t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let b = tape.constant(&t(&[1], &[0.0])).unwrap();
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).unwrap(), data.as_slice());
    }

    #[test]
    fn all_ones_kernel_sums_the_window() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.constant(&t(&[1, 1, 3, 3], &data)).unwrap();
        let k = tape.constant(&Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let b = tape.constant(&t(&[1], &[0.0])).unwrap();
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).unwrap(), &[45.0]);
    }

    #[test]
    fn conv_output_extent_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros([2, 3, 7, 9])).unwrap();
        let k = tape.constant(&Tensor::zeros([4, 3, 3, 3])).unwrap();
        let b = tape.constant(&Tensor::zeros([4])).unwrap();
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        // floor((7 + 2 - 3) / 2) + 1 = 4, floor((9 + 2 - 3) / 2) + 1 = 5
        assert_eq!(tape.shape(y).unwrap(), &[2, 4, 4, 5]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros([1, 2, 3, 3])).unwrap();
        let k = tape.constant(&Tensor::zeros([1, 3, 3, 3])).unwrap();
        let b = tape.constant(&Tensor::zeros([1])).unwrap();
        assert!(matches!(tape.conv2d(x, k, b, 1, 0), Err(Error::Shape(_))));

        let k = tape.constant(&Tensor::zeros([1, 2, 5, 5])).unwrap();
        assert!(matches!(tape.conv2d(x, k, b, 1, 0), Err(Error::Domain(_))));
        assert!(tape.conv2d(x, k, b, 1, 1).is_ok());
    }

    #[test]
    fn maxpool_picks_max_and_routes_ties_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[4.0]);

        tape.reset();
        let x = tape.leaf(&Tensor::full([1, 1, 2, 2], 7.0)).unwrap();
        let y = tape.maxpool2d(x, 2).unwrap();
        let s = tape.sum_all(y).unwrap();
        assert_eq!(tape.item(s).unwrap(), 7.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_indivisible_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros([1, 1, 3, 4])).unwrap();
        assert!(matches!(tape.maxpool2d(x, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn gap_mean_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[1, 1]);
        assert_eq!(tape.value(y).unwrap(), &[2.5]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[0.25; 4]);

        tape.reset();
        let x = tape.constant(&Tensor::full([1, 2, 3, 3], -1.5)).unwrap();
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[-1.5, -1.5]);
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[2.0, 3.0])).unwrap();
        let w = tape.constant(&t(&[1, 2], &[1.0, 1.0])).unwrap();
        let b = tape.constant(&t(&[1], &[1.0])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[6.0]);

        let x = tape.constant(&t(&[2, 2], &[2.0, -3.0, 0.5, 4.0])).unwrap();
        let eye = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let zero = tape.constant(&Tensor::zeros([2])).unwrap();
        let y = tape.dense(x, eye, zero).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[2.0, -3.0, 0.5, 4.0]);

        let bad = tape.constant(&Tensor::zeros([3, 3])).unwrap();
        assert!(matches!(tape.dense(x, bad, zero), Err(Error::Shape(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[3], &[-3.0, 0.0, 3.0])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).unwrap(), &[0.0, 0.0, 3.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).unwrap()[1], 0.5);
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
        let two = tape.constant(&Tensor::scalar(2.0)).unwrap();
        let m = tape.mul(x, two).unwrap();
        assert_eq!(tape.value(m).unwrap(), &[-6.0, 0.0, 6.0]);
        let d = tape.sub(two, x).unwrap();
        assert_eq!(tape.value(d).unwrap(), &[5.0, 2.0, -1.0]);
        let y = tape.constant(&t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.add(x, y), Err(Error::Shape(_))));
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[0.25]);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let m = tape.mean_all(x).unwrap();
        assert_eq!(tape.item(m).unwrap(), 2.0);

        tape.reset();
        let x = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[1.0; 4]);

        tape.reset();
        let x = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = tape.mean_all(x).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[0.25; 4]);
    }

    #[test]
    fn axis_reduction_shapes_and_values() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.leaf(&t(&[2, 3, 4], &data)).unwrap();
        let s = tape.sum_axes(x, &[1]).unwrap();
        assert_eq!(tape.shape(s).unwrap(), &[2, 4]);
        // out[b, k] = Σ_j (12 b + 4 j + k)
        let expected: Vec<f64> = (0..2)
            .flat_map(|b| (0..4).map(move |k| (0..3).map(|j| (12 * b + 4 * j + k) as f64).sum()))
            .collect();
        assert_eq!(tape.value(s).unwrap(), expected.as_slice());
        let m = tape.mean_axes(x, &[0, 2]).unwrap();
        assert_eq!(tape.shape(m).unwrap(), &[3]);
        assert_eq!(tape.value(m).unwrap(), &[7.5, 11.5, 15.5]);
        assert!(tape.sum_axes(x, &[3]).is_err());
        assert!(tape.sum_axes(x, &[1, 1]).is_err());

        let empty = tape.leaf(&Tensor::zeros([0, 3])).unwrap();
        assert!(matches!(tape.sum_axes(empty, &[0]), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_contracts() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[6.0]);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        assert!(matches!(tape.relu(x), Err(Error::Contract(_))));

        tape.reset();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        let v = tape.leaf(&Tensor::zeros([2])).unwrap();
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));

        let mut other = Tape::new();
        let foreign = other.leaf(&Tensor::scalar(1.0)).unwrap();
        assert!(matches!(tape.backward(foreign), Err(Error::Contract(_))));
    }

    #[test]
    fn grads_flow_only_to_differentiable_leaves() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::scalar(2.0)).unwrap();
        let c = tape.constant(&Tensor::scalar(5.0)).unwrap();
        let y = tape.mul(a, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap().unwrap(), &[5.0]);
        assert!(tape.grad(c).unwrap().is_none());
    }
}
