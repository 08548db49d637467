use super::conv::ConvGeometry;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub mode: PadMode,
    pub width: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        mode: PadMode::Zero,
        width: 0,
    };

    pub fn new(mode: PadMode, width: usize) -> Self {
        Self { mode, width }
    }

    /// Zero padding that preserves spatial size for an odd kernel at stride 1.
    pub fn same(kernel: usize) -> Self {
        Self::new(PadMode::Zero, (kernel - 1) / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Box<ConvGeometry>,
    },
    Activation(Var, ActivationKind),
    GlobalAvgPool(Var),
    ChannelMean(Var),
    ChannelMax {
        input: Var,
        argmax: Vec<u32>,
    },
    Binary(Var, Var, BinaryKind),
    Concat(Vec<Var>),
    Abs(Var),
    Powf(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    AvgPool2(Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    freed: bool,
}

/// Records branch decisions of non-differentiable ops so finite-difference
/// checks can detect when a perturbation crossed a kink.
#[derive(Debug, Default)]
struct KinkTracker {
    hash: u64,
    exact_hits: usize,
}

impl KinkTracker {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    fn feed(&mut self, v: u64) {
        self.hash = (self.hash ^ v).wrapping_mul(Self::PRIME);
    }
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order; every input id is smaller than its
/// consumer's id. `backward` walks the list once in reverse.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    kinks: Option<KinkTracker>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

/// Iterates `(out_index, b_index)` for `b` broadcast onto `a_shape`.
fn for_each_broadcast(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = a_shape.len();
    let mut b_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        b_strides[d] = if b_shape[d] == 1 { 0 } else { acc };
        acc *= b_shape[d];
    }
    let inner = a_shape[rank - 1];
    let inner_stride = b_strides[rank - 1];
    let outer: usize = a_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut out = 0;
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            f(out, base + j * inner_stride);
            out += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => acc
            .iter_mut()
            .zip(&contribution)
            .for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(contribution),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            kinks: None,
        }
    }

    /// A graph that records no gradient information and allows freeing
    /// intermediate values.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enables branch recording for non-differentiable ops (used by
    /// [`super::gradient_check`]).
    pub fn with_kink_tracking(mut self) -> Self {
        self.kinks = Some(KinkTracker {
            hash: KinkTracker::OFFSET,
            exact_hits: 0,
        });
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Branch signature and count of inputs exactly at a kink.
    pub fn kink_signature(&self) -> Option<(u64, usize)> {
        self.kinks.as_ref().map(|k| (k.hash, k.exact_hits))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        let node = self
            .nodes
            .get(v.0)
            .ok_or_else(|| Error::Contract(format!("unknown node {}", v.0)))?;
        if node.freed {
            return Err(Error::Contract(format!("node {} was freed", v.0)));
        }
        Ok(node)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("valid live node").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|n| n.value.grad())
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Detaches a leaf's tensor (value and gradient) from the graph.
    pub fn take_leaf(&mut self, v: Var) -> Result<Tensor<T>> {
        let node = self
            .nodes
            .get_mut(v.0)
            .ok_or_else(|| Error::Contract(format!("unknown node {}", v.0)))?;
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract(format!("node {} is not a leaf", v.0)));
        }
        node.freed = true;
        Ok(std::mem::replace(&mut node.value, Tensor::scalar(T::zero())))
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            freed: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; gradients are tracked iff the tensor's `requires_grad` flag
    /// is set and the graph has gradients enabled.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
            freed: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn parameter(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Releases the values of non-leaf nodes in `[from, to)` except `keep`.
    /// Only permitted on inference graphs.
    pub fn free_range(&mut self, from: usize, to: usize, keep: &[Var]) -> Result<()> {
        if self.grad_enabled {
            return Err(Error::Contract(
                "free_range requires an inference graph".into(),
            ));
        }
        for id in from..to.min(self.nodes.len()) {
            if keep.iter().any(|k| k.0 == id) || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let node = &mut self.nodes[id];
            node.freed = true;
            node.value = Tensor::scalar(T::zero());
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let [n, c, h, w] = self.node(input)?.value.dims4()?;
        let [o, i, kh, kw] = self.node(weight)?.value.dims4()?;
        if c != i {
            return Err(shape_err(format!(
                "conv2d: input has {c} channels, weight expects {i}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Unsupported(format!(
                "conv2d: even kernel {kh}×{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d: stride must be positive".into()));
        }
        if h + 2 * padding.width < kh || w + 2 * padding.width < kw {
            return Err(shape_err(format!(
                "conv2d: padded input {}×{} smaller than kernel {kh}×{kw}",
                h + 2 * padding.width,
                w + 2 * padding.width
            )));
        }
        if padding.mode == PadMode::Reflect && (padding.width >= h || padding.width >= w) {
            return Err(shape_err(format!(
                "conv2d: reflect padding {} needs extents above it, got {h}×{w}",
                padding.width
            )));
        }
        if let Some(b) = bias {
            if self.node(b)?.value.len() != o {
                return Err(shape_err(format!("conv2d: bias must have {o} entries")));
            }
        }
        let geom = ConvGeometry::new(n, c, h, w, o, kh, kw, stride, padding);
        let out = geom.forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[n, o, geom.ho, geom.wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom: Box::new(geom),
            },
            &inputs,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: ActivationKind) -> Result<Var> {
        let x = &self.node(input)?.value;
        let data: Vec<T> = match kind {
            ActivationKind::Relu => x
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
            ActivationKind::Sigmoid => x
                .data()
                .iter()
                .map(|&v| T::one() / (T::one() + (-v).exp()))
                .collect(),
        };
        let value = Tensor::from_vec(x.shape(), data)?;
        if kind == ActivationKind::Relu {
            self.track_sign(input);
        }
        Ok(self.push(value, Op::Activation(input, kind), &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, ActivationKind::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, ActivationKind::Sigmoid)
    }

    fn track_sign(&mut self, input: Var) {
        let Some(tracker) = self.kinks.as_mut() else {
            return;
        };
        for &v in self.nodes[input.0].value.data() {
            tracker.feed((v > T::zero()) as u64 + 2 * (v < T::zero()) as u64);
            if v == T::zero() {
                tracker.exact_hits += 1;
            }
        }
    }

    /// NCHW -> NC11 spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let [n, c, h, w] = x.dims4()?;
        let count = T::of((h * w) as f64);
        let data: Vec<T> = x
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().fold(T::zero(), |a, &b| a + b) / count)
            .collect();
        let value = Tensor::from_vec(&[n, c, 1, 1], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(input), &[input]))
    }

    /// NCHW -> N1HW reduction over channels.
    pub fn channel_reduce(&mut self, input: Var, kind: ReduceKind) -> Result<Var> {
        let x = &self.node(input)?.value;
        let [n, c, h, w] = x.dims4()?;
        let plane = h * w;
        let data = x.data();
        let mut out = vec![T::zero(); n * plane];
        match kind {
            ReduceKind::Mean => {
                let count = T::of(c as f64);
                for s in 0..n {
                    for p in 0..plane {
                        let mut acc = T::zero();
                        for ch in 0..c {
                            acc = acc + data[(s * c + ch) * plane + p];
                        }
                        out[s * plane + p] = acc / count;
                    }
                }
                let value = Tensor::from_vec(&[n, 1, h, w], out)?;
                Ok(self.push(value, Op::ChannelMean(input), &[input]))
            }
            ReduceKind::Max => {
                let mut argmax = vec![0u32; n * plane];
                let mut ties = 0usize;
                for s in 0..n {
                    for p in 0..plane {
                        let mut best = data[s * c * plane + p];
                        let mut arg = 0;
                        for ch in 1..c {
                            let v = data[(s * c + ch) * plane + p];
                            if v > best {
                                best = v;
                                arg = ch;
                            } else if v == best {
                                ties += 1;
                            }
                        }
                        out[s * plane + p] = best;
                        argmax[s * plane + p] = arg as u32;
                    }
                }
                if let Some(tracker) = self.kinks.as_mut() {
                    argmax.iter().for_each(|&a| tracker.feed(a as u64));
                    tracker.exact_hits += ties;
                }
                let value = Tensor::from_vec(&[n, 1, h, w], out)?;
                Ok(self.push(value, Op::ChannelMax { input, argmax }, &[input]))
            }
        }
    }

    fn check_broadcast(a: &[usize], b: &[usize]) -> Result<()> {
        let ok = a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| x == y || y == 1);
        if ok {
            Ok(())
        } else {
            Err(shape_err(format!("cannot broadcast {b:?} onto {a:?}")))
        }
    }

    /// Elementwise `a ∘ b` where `b` may have singleton axes expanded onto `a`.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let av = &self.node(a)?.value;
        let bv = &self.node(b)?.value;
        Self::check_broadcast(av.shape(), bv.shape())?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<T> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); av.len()];
            let (ad, bd) = (av.data(), bv.data());
            for_each_broadcast(av.shape(), bv.shape(), |i, j| out[i] = f(ad[i], bd[j]));
            out
        };
        let value = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push(value, Op::Binary(a, b, kind), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.node(*parts.first().ok_or_else(|| shape_err("concat of nothing"))?)?;
        let [n, _, h, w] = first.value.dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.node(p)?.value.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err("concat_channels: mismatched N/H/W"));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let pc = v.shape()[1];
                data.extend_from_slice(&v.data()[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        let value = Tensor::from_vec(&[n, total_c, h, w], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn abs(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let value = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v.abs()).collect())?;
        self.track_sign(input);
        Ok(self.push(value, Op::Abs(input), &[input]))
    }

    /// `x^p` for non-negative `x`. The derivative at exactly zero is taken as 0.
    pub fn powf(&mut self, input: Var, p: f64) -> Result<Var> {
        let x = &self.node(input)?.value;
        let e = T::of(p);
        let value = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v.powf(e)).collect())?;
        Ok(self.push(value, Op::Powf(input, p), &[input]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = &self.node(input)?.value;
        let f = T::of(factor);
        let value = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v * f).collect())?;
        Ok(self.push(value, Op::Scale(input, factor), &[input]))
    }

    pub fn add_scalar(&mut self, input: Var, offset: f64) -> Result<Var> {
        let x = &self.node(input)?.value;
        let o = T::of(offset);
        let value = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v + o).collect())?;
        Ok(self.push(value, Op::AddScalar(input), &[input]))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let s = x.data().iter().fold(T::zero(), |a, &b| a + b);
        let value = Tensor::scalar(s / T::of(x.len() as f64));
        Ok(self.push(value, Op::Mean(input), &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let value = Tensor::scalar(x.data().iter().fold(T::zero(), |a, &b| a + b));
        Ok(self.push(value, Op::Sum(input), &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(input)?.value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// 2×2 mean pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let [n, c, h, w] = x.dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(shape_err(format!("avg_pool2: {h}×{w} too small")));
        }
        let quarter = T::of(0.25);
        let d = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let src = &d[p * h * w..(p + 1) * h * w];
            for r in 0..oh {
                for s in 0..ow {
                    let i = 2 * r * w + 2 * s;
                    out.push((src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2(input), &[input]))
    }

    /// Reverse-mode sweep from a one-element `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        let loss_len = self.node(loss)?.value.len();
        if loss_len != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {loss_len} elements"
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if node.freed {
                return Err(Error::Contract(format!("node {id} was freed")));
            }
            self.propagate(id, &g, &mut grads)?;
        }

        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[id];
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                node.value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                ];
                let (dx, dw, db) = geom.backward(
                    self.node(*input)?.value.data(),
                    self.node(*weight)?.value.data(),
                    g,
                    need,
                );
                if let Some(dx) = dx {
                    add_into(&mut grads[input.0], dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[weight.0], dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Activation(input, kind) => {
                let dx: Vec<T> = match kind {
                    ActivationKind::Relu => {
                        let x = self.node(*input)?.value.data();
                        x.iter()
                            .zip(g)
                            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                            .collect()
                    }
                    ActivationKind::Sigmoid => out
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &g)| g * y * (T::one() - y))
                        .collect(),
                };
                add_into(&mut grads[input.0], dx);
            }
            Op::GlobalAvgPool(input) => {
                let x = &self.node(*input)?.value;
                let [_, _, h, w] = x.dims4()?;
                let inv = T::one() / T::of((h * w) as f64);
                let mut dx = Vec::with_capacity(x.len());
                for &gp in g {
                    dx.extend(std::iter::repeat_n(gp * inv, h * w));
                }
                add_into(&mut grads[input.0], dx);
            }
            Op::ChannelMean(input) => {
                let x = &self.node(*input)?.value;
                let [n, c, h, w] = x.dims4()?;
                let plane = h * w;
                let inv = T::one() / T::of(c as f64);
                let mut dx = vec![T::zero(); x.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let dst = &mut dx[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        let src = &g[s * plane..(s + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(d, &gv)| *d = gv * inv);
                    }
                }
                add_into(&mut grads[input.0], dx);
            }
            Op::ChannelMax { input, argmax } => {
                let x = &self.node(*input)?.value;
                let [n, c, h, w] = x.dims4()?;
                let plane = h * w;
                let mut dx = vec![T::zero(); x.len()];
                for s in 0..n {
                    for p in 0..plane {
                        let ch = argmax[s * plane + p] as usize;
                        dx[(s * c + ch) * plane + p] = g[s * plane + p];
                    }
                }
                add_into(&mut grads[input.0], dx);
            }
            Op::Binary(a, b, kind) => self.binary_backward(*a, *b, *kind, g, grads)?,
            Op::Concat(parts) => {
                let [n, total_c, h, w] = out.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.node(p)?.value.shape()[1];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(n * pc * plane);
                        for s in 0..n {
                            let start = (s * total_c + offset) * plane;
                            dp.extend_from_slice(&g[start..start + pc * plane]);
                        }
                        add_into(&mut grads[p.0], dp);
                    }
                    offset += pc;
                }
            }
            Op::Abs(input) => {
                let x = self.node(*input)?.value.data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::Powf(input, p) => {
                let x = self.node(*input)?.value.data();
                let pe = T::of(*p);
                let pm1 = T::of(*p - 1.0);
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        if x == T::zero() {
                            T::zero()
                        } else {
                            g * pe * x.powf(pm1)
                        }
                    })
                    .collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::Scale(input, f) => {
                let f = T::of(*f);
                add_into(&mut grads[input.0], g.iter().map(|&g| g * f).collect());
            }
            Op::AddScalar(input) | Op::Reshape(input) => {
                add_into(&mut grads[input.0], g.to_vec());
            }
            Op::Mean(input) => {
                let len = self.node(*input)?.value.len();
                let v = g[0] / T::of(len as f64);
                add_into(&mut grads[input.0], vec![v; len]);
            }
            Op::Sum(input) => {
                let len = self.node(*input)?.value.len();
                add_into(&mut grads[input.0], vec![g[0]; len]);
            }
            Op::AvgPool2(input) => {
                let x = &self.node(*input)?.value;
                let [n, c, h, w] = x.dims4()?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); x.len()];
                for p in 0..n * c {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    for r in 0..oh {
                        for s in 0..ow {
                            let v = src[r * ow + s] * quarter;
                            let i = 2 * r * w + 2 * s;
                            dst[i] = v;
                            dst[i + 1] = v;
                            dst[i + w] = v;
                            dst[i + w + 1] = v;
                        }
                    }
                }
                add_into(&mut grads[input.0], dx);
            }
        }
        Ok(())
    }

    fn binary_backward(
        &self,
        a: Var,
        b: Var,
        kind: BinaryKind,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let av = &self.node(a)?.value;
        let bv = &self.node(b)?.value;
        let (ad, bd) = (av.data(), bv.data());
        let same = av.shape() == bv.shape();
        if self.needs(a) {
            let mut da = vec![T::zero(); ad.len()];
            let mut fill = |i: usize, j: usize| {
                da[i] = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g[i],
                    BinaryKind::Mul => g[i] * bd[j],
                    BinaryKind::Div => g[i] / bd[j],
                }
            };
            if same {
                (0..ad.len()).for_each(|i| fill(i, i));
            } else {
                for_each_broadcast(av.shape(), bv.shape(), fill);
            }
            add_into(&mut grads[a.0], da);
        }
        if self.needs(b) {
            let mut db = vec![T::zero(); bd.len()];
            let mut fill = |i: usize, j: usize| {
                let v = match kind {
                    BinaryKind::Add => g[i],
                    BinaryKind::Sub => -g[i],
                    BinaryKind::Mul => g[i] * ad[i],
                    BinaryKind::Div => -g[i] * ad[i] / (bd[j] * bd[j]),
                };
                db[j] = db[j] + v;
            };
            if same {
                (0..ad.len()).for_each(|i| fill(i, i));
            } else {
                for_each_broadcast(av.shape(), bv.shape(), fill);
            }
            add_into(&mut grads[b.0], db);
        }
        Ok(())
    }
}
