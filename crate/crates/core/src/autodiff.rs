//! Reverse-mode differentiation over [`Tensor`] operations.
//!
//! A [`Tape`] evaluates every primitive eagerly and appends it to an
//! append-only list, so node ids are already in topological order. The
//! backward pass walks that list once in reverse. Spike nonlinearities are
//! recorded with a [`SurrogateSpec`]; their local derivative in the backward
//! pass is the surrogate `ψ(v - v_th)` instead of the Heaviside's zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Triangular,
    Arctan,
    ScaledTanh,
}

/// Surrogate derivative used in place of the Heaviside's derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    /// Sharpness `γ`.
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_threshold")]
    pub v_th: f64,
}

fn default_scale() -> f64 {
    1.0
}

fn default_threshold() -> f64 {
    1.0
}

impl SurrogateSpec {
    pub fn new(kind: SurrogateKind) -> Self {
        Self {
            kind,
            scale: 1.0,
            v_th: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "surrogate scale must be positive, got {}",
                self.scale
            )));
        }
        if !self.v_th.is_finite() {
            return Err(Error::Config("surrogate threshold must be finite".into()));
        }
        Ok(())
    }

    /// `ψ(u)` for `u = v - v_th`.
    pub fn derivative(&self, u: f64) -> f64 {
        let g = self.scale;
        match self.kind {
            SurrogateKind::Arctan => {
                let a = std::f64::consts::PI * g * u;
                g / (1.0 + a * a)
            }
            SurrogateKind::Triangular => g * (1.0 - g * u.abs()).max(0.0),
            SurrogateKind::ScaledTanh => {
                let t = (g * u).tanh();
                g * (1.0 - t * t)
            }
        }
    }

    /// Antiderivative `Φ` of `ψ` with `Φ(-∞) = 0`; the smooth stand-in for
    /// the Heaviside used when checking gradients numerically.
    pub fn primitive(&self, u: f64) -> f64 {
        let g = self.scale;
        match self.kind {
            SurrogateKind::Arctan => (std::f64::consts::PI * g * u).atan() / std::f64::consts::PI + 0.5,
            SurrogateKind::Triangular => {
                let x = (g * u).clamp(-1.0, 1.0);
                if x <= 0.0 {
                    0.5 * (1.0 + x) * (1.0 + x)
                } else {
                    1.0 - 0.5 * (1.0 - x) * (1.0 - x)
                }
            }
            // ψ integrates to 2 for this kind, so Φ runs from 0 to 2.
            SurrogateKind::ScaledTanh => 1.0 + (g * u).tanh(),
        }
    }
}

/// Elementwise `ψ(u)` over a tensor of membrane offsets `u = v - v_th`.
pub fn surrogate_derivative(u: &Tensor, spec: &SurrogateSpec) -> Tensor {
    u.map(|x| spec.derivative(x))
}

/// Forward behaviour of spike nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeMode {
    /// Heaviside forward, surrogate backward.
    #[default]
    Hard,
    /// `Φ` forward, `ψ = Φ'` backward. Only for gradient checking.
    Smooth,
}

/// A primitive operation as accepted by [`Tape::record`].
#[derive(Clone, Debug)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale(f64),
    OneMinus,
    /// Tensor times a one-element tensor.
    MulScalar,
    MatVec,
    /// Inputs: input, kernel.
    Conv { stride: (usize, usize), padding: (usize, usize) },
    /// Inputs: `C×H×W` map, `[C]` bias.
    ChannelBias,
    Sigmoid,
    Tanh,
    Spike { spec: SurrogateSpec, mode: SpikeMode },
    MaxPool2d,
    Reshape(Vec<usize>),
    MaxOverTime,
    CrossEntropy { label: usize },
    Sum,
    AddN,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    OneMinus(NodeId),
    MulScalar(NodeId, NodeId),
    MatVec { weight: NodeId, input: NodeId },
    Conv { input: NodeId, kernel: NodeId, geometry: ConvGeometry },
    ChannelBias { input: NodeId, bias: NodeId },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Spike { membrane: NodeId, spec: SurrogateSpec },
    MaxPool { input: NodeId, indices: Vec<usize> },
    Reshape(NodeId),
    MaxOverTime { steps: Vec<NodeId>, argmax: Vec<usize> },
    CrossEntropy { logits: NodeId, label: usize, softmax: Vec<f64> },
    Sum(NodeId),
    AddN(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of evaluated operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, or `None` if no path
    /// connects them.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Number of nodes the backward sweep visited.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    fn grad_flag(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf (a trainable parameter or a probed input).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Copies `id`'s value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId> {
        let value = self.check(id)?.value.clone();
        Ok(self.constant(value))
    }

    /// Records `prim` applied to `inputs` and returns the output node.
    pub fn record(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        for &id in inputs {
            self.check(id)?;
        }
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "primitive expects {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match prim {
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Scale(k) => arity(1).map(|_| self.scale(inputs[0], k)),
            Primitive::OneMinus => arity(1).map(|_| self.one_minus(inputs[0])),
            Primitive::MulScalar => arity(2).and_then(|_| self.mul_scalar(inputs[0], inputs[1])),
            Primitive::MatVec => arity(2).and_then(|_| self.matvec(inputs[0], inputs[1])),
            Primitive::Conv { stride, padding } => {
                arity(2).and_then(|_| self.conv(inputs[0], inputs[1], stride, padding))
            }
            Primitive::ChannelBias => arity(2).and_then(|_| self.channel_bias(inputs[0], inputs[1])),
            Primitive::Sigmoid => arity(1).map(|_| self.sigmoid(inputs[0])),
            Primitive::Tanh => arity(1).map(|_| self.tanh(inputs[0])),
            Primitive::Spike { spec, mode } => arity(1).map(|_| self.spike(inputs[0], spec, mode)),
            Primitive::MaxPool2d => arity(1).and_then(|_| self.maxpool2d(inputs[0])),
            Primitive::Reshape(shape) => arity(1).and_then(|_| self.reshape(inputs[0], shape)),
            Primitive::MaxOverTime => self.max_over_time(inputs),
            Primitive::CrossEntropy { label } => arity(1).and_then(|_| self.cross_entropy(inputs[0], label)),
            Primitive::Sum => arity(1).map(|_| self.sum(inputs[0])),
            Primitive::AddN => self.add_n(inputs),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).scale(k);
        let rg = self.grad_flag(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| 1.0 - v);
        let rg = self.grad_flag(&[a]);
        self.push(value, Op::OneMinus(a), rg)
    }

    /// `a · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let k = self
            .value(s)
            .item()
            .ok_or_else(|| Error::dim("mul_scalar", self.shape(a), self.shape(s)))?;
        let value = self.value(a).scale(k);
        let rg = self.grad_flag(&[a, s]);
        Ok(self.push(value, Op::MulScalar(a, s), rg))
    }

    pub fn matvec(&mut self, weight: NodeId, input: NodeId) -> Result<NodeId> {
        let value = tensor::matvec(self.value(weight), self.value(input))?;
        let rg = self.grad_flag(&[weight, input]);
        Ok(self.push(value, Op::MatVec { weight, input }, rg))
    }

    /// `weight · input + bias`.
    pub fn affine(&mut self, weight: NodeId, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let wx = self.matvec(weight, input)?;
        self.add(wx, bias)
    }

    /// Cross-correlation without bias.
    pub fn conv(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<NodeId> {
        let value = tensor::conv2d_general(self.value(input), self.value(kernel), None, stride, padding)?;
        let geometry = ConvGeometry::infer(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.grad_flag(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv {
                input,
                kernel,
                geometry,
            },
            rg,
        ))
    }

    /// Same-mode stride-1 convolution.
    pub fn conv_same(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let p = tensor::same_padding(self.value(kernel))?;
        self.conv(input, kernel, (1, 1), (p, p))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let b = self.value(bias);
        let (&[c, h, w], &[bc]) = (x.shape(), b.shape()) else {
            return Err(Error::dim("channel_bias", x.shape(), b.shape()));
        };
        if c != bc {
            return Err(Error::dim("channel_bias", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for (plane, &bv) in data.chunks_exact_mut(h * w).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new([c, h, w], data)?;
        let rg = self.grad_flag(&[input, bias]);
        Ok(self.push(value, Op::ChannelBias { input, bias }, rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).sigmoid();
        let rg = self.grad_flag(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).tanh();
        let rg = self.grad_flag(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Spike output `H(v - v_th)` (or `Φ(v - v_th)` in smooth mode).
    pub fn spike(&mut self, membrane: NodeId, spec: SurrogateSpec, mode: SpikeMode) -> NodeId {
        let v_th = spec.v_th;
        let value = match mode {
            SpikeMode::Hard => self.value(membrane).map(|v| tensor::heaviside(v - v_th)),
            SpikeMode::Smooth => self.value(membrane).map(|v| spec.primitive(v - v_th)),
        };
        let rg = self.grad_flag(&[membrane]);
        self.push(value, Op::Spike { membrane, spec }, rg)
    }

    pub fn maxpool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let (value, indices) = tensor::maxpool2d_with_indices(self.value(input))?;
        let rg = self.grad_flag(&[input]);
        Ok(self.push(value, Op::MaxPool { input, indices }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if self.shape(a) == shape.as_slice() {
            return Ok(a);
        }
        let value = self.value(a).reshape(shape)?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Per-component maximum across `steps`. The gradient goes to the
    /// earliest step attaining the maximum.
    pub fn max_over_time(&mut self, steps: &[NodeId]) -> Result<NodeId> {
        let first = *steps.first().ok_or(Error::Empty("readout trajectory"))?;
        let shape = self.shape(first).to_vec();
        let mut best = self.value(first).data().to_vec();
        let mut argmax = vec![0; best.len()];
        for (t, &id) in steps.iter().enumerate().skip(1) {
            let v = self.check(id)?.value.data();
            if self.shape(id) != shape.as_slice() {
                return Err(Error::dim("max_over_time", &shape, self.shape(id)));
            }
            for (c, &x) in v.iter().enumerate() {
                if x > best[c] {
                    best[c] = x;
                    argmax[c] = t;
                }
            }
        }
        let rg = self.grad_flag(steps);
        let value = Tensor::new(shape, best)?;
        Ok(self.push(
            value,
            Op::MaxOverTime {
                steps: steps.to_vec(),
                argmax,
            },
            rg,
        ))
    }

    /// `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let l = self.value(logits).data();
        if label >= l.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: l.len(),
            });
        }
        let (loss, softmax) = softmax_cross_entropy(l, label);
        let rg = self.grad_flag(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.grad_flag(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Elementwise sum of same-shaped nodes, accumulated in the given order.
    pub fn add_n(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let first = *items.first().ok_or(Error::Empty("add_n inputs"))?;
        let mut acc = self.value(first).clone();
        for &id in &items[1..] {
            let v = &self.check(id)?.value;
            if v.shape() != acc.shape() {
                return Err(Error::dim("add_n", acc.shape(), v.shape()));
            }
            acc.add_assign(v);
        }
        let rg = self.grad_flag(items);
        Ok(self.push(acc, Op::AddN(items.to_vec()), rg))
    }

    /// Propagates `∂loss/∂node` to every node reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(node.value.shape().to_vec(), vec![1.0])?);
        let mut visited = 0;
        for i in (0..self.nodes.len()).rev() {
            visited += 1;
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, gd));
                self.accumulate(grads, *b, |s| add_into(s, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, gd));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(gd).zip(bv).for_each(|((s, g), b)| *s += g * b)
                });
                self.accumulate(grads, *b, |s| {
                    s.iter_mut().zip(gd).zip(av).for_each(|((s, g), a)| *s += g * a)
                });
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s += k * g));
            }
            Op::OneMinus(a) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s -= g));
            }
            Op::MulScalar(a, k) => {
                let kv = self.value(*k).data()[0];
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |s| s.iter_mut().zip(gd).for_each(|(s, g)| *s += kv * g));
                self.accumulate(grads, *k, |s| {
                    s[0] += gd.iter().zip(av).map(|(g, a)| g * a).sum::<f64>();
                });
            }
            Op::MatVec { weight, input } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *weight, |s| tensor::outer_accumulate(s, gd, x));
                let w = self.value(*weight);
                self.accumulate(grads, *input, |s| add_into(s, &tensor::matvec_transposed(w, gd)));
            }
            Op::Conv {
                input,
                kernel,
                geometry,
            } => {
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                self.accumulate(grads, *kernel, |s| tensor::conv_backward_kernel(geometry, gd, x, s));
                self.accumulate(grads, *input, |s| tensor::conv_backward_input(geometry, gd, k, s));
            }
            Op::ChannelBias { input, bias } => {
                self.accumulate(grads, *input, |s| add_into(s, gd));
                let plane = gd.len() / self.value(*bias).len();
                self.accumulate(grads, *bias, |s| {
                    for (b, chunk) in s.iter_mut().zip(gd.chunks_exact(plane)) {
                        *b += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |s| {
                    s.iter_mut()
                        .zip(gd)
                        .zip(y)
                        .for_each(|((s, g), y)| *s += g * y * (1.0 - y))
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |s| {
                    s.iter_mut()
                        .zip(gd)
                        .zip(y)
                        .for_each(|((s, g), y)| *s += g * (1.0 - y * y))
                });
            }
            Op::Spike { membrane, spec } => {
                let v = self.value(*membrane).data();
                self.accumulate(grads, *membrane, |s| {
                    s.iter_mut()
                        .zip(gd)
                        .zip(v)
                        .for_each(|((s, g), v)| *s += g * spec.derivative(v - spec.v_th))
                });
            }
            Op::MaxPool { input, indices } => {
                self.accumulate(grads, *input, |s| {
                    for (&i, g) in indices.iter().zip(gd) {
                        s[i] += g;
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |s| add_into(s, gd)),
            Op::MaxOverTime { steps, argmax } => {
                for (c, (&t, g)) in argmax.iter().zip(gd).enumerate() {
                    self.accumulate(grads, steps[t], |s| s[c] += g);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            } => {
                let g0 = gd[0];
                self.accumulate(grads, *logits, |s| {
                    for (j, (s, p)) in s.iter_mut().zip(softmax).enumerate() {
                        let target = if j == *label { 1.0 } else { 0.0 };
                        *s += g0 * (p - target);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::AddN(items) => {
                for &id in items {
                    self.accumulate(grads, id, |s| add_into(s, gd));
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
        f(slot.data_mut());
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, g)| *a += g);
}

/// Max-stabilised softmax cross-entropy. Returns the loss and the softmax.
pub(crate) fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let (arg, m) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, e)| e)
        .sum();
    let loss = (m - logits[label]) + rest.ln_1p();
    let total = 1.0 + rest;
    (loss, exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn add_routes_unit_gradient_to_both_inputs() {
        let mut tape = Tape::new();
        let a = tape.variable(v(&[1.0, 2.0]));
        let b = tape.variable(v(&[3.0, 4.0]));
        let c = tape.record(Primitive::Add, &[a, b]).unwrap();
        let loss = tape.record(Primitive::Sum, &[c]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn mul_product_rule_and_square() {
        let mut tape = Tape::new();
        let a = tape.variable(v(&[2.0]));
        let b = tape.variable(v(&[5.0]));
        let c = tape.record(Primitive::Mul, &[a, b]).unwrap();
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[5.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0]);

        let mut tape = Tape::new();
        let x = tape.variable(v(&[3.0]));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn record_rejects_unknown_node() {
        let mut tape = Tape::new();
        let a = tape.variable(v(&[1.0]));
        let err = tape.record(Primitive::Add, &[a, NodeId(7)]).unwrap_err();
        assert!(matches!(err, Error::UnknownNode(7)));
    }

    #[test]
    fn backward_rejects_non_scalar_and_unknown_loss() {
        let mut tape = Tape::new();
        let a = tape.variable(v(&[1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
        assert!(matches!(tape.backward(NodeId(3)), Err(Error::UnknownNode(3))));
    }

    #[test]
    fn affine_bias_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::new([2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
        let x = tape.constant(v(&[1.0, 2.0, 3.0]));
        let b = tape.variable(v(&[0.0, 0.0]));
        let y = tape.affine(w, x, b).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.variable(v(&[1.0, 2.0]));
        let zero = tape.scale(w, 0.0);
        let c = tape.constant(v(&[4.0, 4.0]));
        let s = tape.add(zero, c).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut tape = Tape::new();
        let a = tape.variable(v(&[0.3, -0.1]));
        let s = tape.sigmoid(a);
        let t = tape.tanh(s);
        let m = tape.mul(s, t).unwrap();
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.visited(), tape.len());
    }

    #[test]
    fn surrogate_examples() {
        let arctan = SurrogateSpec::new(SurrogateKind::Arctan);
        assert_eq!(arctan.derivative(0.0), 1.0);
        let expected = 1.0 / (1.0 + (std::f64::consts::PI / 2.0).powi(2));
        assert_eq!(arctan.derivative(0.5), arctan.derivative(-0.5));
        assert!((arctan.derivative(0.5) - expected).abs() < 1e-15);
        assert!((expected - 0.2884).abs() < 1e-4);
        let tri = SurrogateSpec::new(SurrogateKind::Triangular);
        assert_eq!(tri.derivative(2.0), 0.0);
        assert_eq!(tri.derivative(0.0), 1.0);
        let st = SurrogateSpec::new(SurrogateKind::ScaledTanh);
        assert_eq!(st.derivative(0.0), 1.0);
    }

    #[test]
    fn surrogate_rejects_non_positive_scale() {
        let mut spec = SurrogateSpec::new(SurrogateKind::Arctan);
        spec.scale = 0.0;
        assert!(spec.validate().is_err());
        spec.scale = -1.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn smooth_primitive_limits() {
        let spec = SurrogateSpec::new(SurrogateKind::Arctan);
        assert_eq!(spec.primitive(0.0), 0.5);
        assert!(spec.primitive(1e9) > 1.0 - 1e-9);
        assert!(spec.primitive(-1e9) < 1e-9);
        let tri = SurrogateSpec::new(SurrogateKind::Triangular);
        assert_eq!(tri.primitive(-3.0), 0.0);
        assert_eq!(tri.primitive(0.0), 0.5);
        assert_eq!(tri.primitive(3.0), 1.0);
    }

    #[test]
    fn spike_uses_surrogate_in_backward() {
        let spec = SurrogateSpec::new(SurrogateKind::Arctan);
        let mut tape = Tape::new();
        let v = tape.variable(v(&[1.5, 0.5, 1.0]));
        let s = tape.spike(v, spec, SpikeMode::Hard);
        assert_eq!(tape.value(s).data(), &[1.0, 0.0, 1.0]);
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        let gv = g.get(v).unwrap().data();
        assert_eq!(gv[2], 1.0);
        assert_eq!(gv[0], gv[1]);
    }

    #[test]
    fn max_over_time_ties_go_to_earliest_step() {
        let mut tape = Tape::new();
        let steps: Vec<_> = [[1.0, 5.0], [4.0, 2.0], [4.0, 5.0]]
            .iter()
            .map(|r| tape.variable(v(r)))
            .collect();
        let m = tape.max_over_time(&steps).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 5.0]);
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(steps[0]).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(g.get(steps[1]).unwrap().data(), &[1.0, 0.0]);
        assert!(g.get(steps[2]).is_none());
    }

    #[test]
    fn cross_entropy_values() {
        let (loss, p) = softmax_cross_entropy(&[0.0, 0.0, 0.0], 1);
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let (loss, _) = softmax_cross_entropy(&[10.0, -10.0], 0);
        let expected = (-20f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-20);
        assert!((loss - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let l = tape.variable(v(&[0.0, 1.0]));
        assert!(matches!(
            tape.cross_entropy(l, 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }
}
