//! Flat row-major tensors and a reverse-mode autodiff tape.
//!
//! A [`Tensor`] is an immutable shape + data pair. Ops live on [`Tape`]; an op
//! records a node only when at least one input is tracked, so constants cost
//! nothing and a forward pass through frozen weights never builds graph.
//! [`Tape::backward`] walks the node list once in reverse and returns a
//! [`GradMap`] addressed by the tensors themselves.
//!
//! All reductions run in a fixed order regardless of shape or thread count, so
//! identical inputs produce bit-identical outputs across runs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Element type of tensors. Training runs at f32; gradient checks at f64.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maxv(self, other: Self) -> Self;
    /// Fused multiply-add; the conv kernels depend on this lowering to FMA.
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_usize(v: usize) -> Self {
        v as f32
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maxv(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_usize(v: usize) -> Self {
        v as f64
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maxv(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

pub type NodeId = usize;

/// Immutable n-dimensional array with an optional handle into the active tape.
/// Cloning is cheap; data is shared.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<[T]>,
    node: Option<NodeId>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if let Some(id) = self.node {
            write!(f, "@{id}")?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data: data.into(), node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::ZERO; numel].into(), node: None }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel].into(), node: None }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v].into(), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Same values, no tape handle. Gradients never flow through the result.
    pub fn detach(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            assert!(i < self.shape[d]);
            off = off * self.shape[d] + i;
        }
        self.data[off]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Leading-axis slice: element `i` of the first dimension.
    pub fn slice0(&self, i: usize) -> Result<Tensor<T>> {
        if self.shape.is_empty() || i >= self.shape[0] {
            return Err(Error::Shape {
                op: "slice0",
                detail: format!("index {i} out of range for {:?}", self.shape),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[i * inner..(i + 1) * inner].to_vec();
        Tensor::from_vec(self.shape[1..].to_vec(), data)
    }

    /// Stack equal-shaped tensors along a new leading axis. The result is
    /// untracked; use it to build batches of constants.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "stack",
            detail: "empty input".into(),
        })?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::Shape {
                    op: "stack",
                    detail: format!("mixed shapes {:?} and {:?}", first.shape, p.shape),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::from_vec(shape, data)
    }
}

// ── Tape ─────────────────────────────────────────────────────────────────────

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Affine { a: T },
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu { slope: T },
    Abs,
    Concat { axis: usize },
    SumAll,
    MeanAll,
    Conv2d { stride: usize, padding: usize, dilation: usize },
    ChannelMean,
    ChannelMax { argmax: Arc<[u32]> },
    GlobalAvgPool,
    NearestResize,
    AvgPool2,
    InstanceNorm { xhat: Arc<[T]>, inv_std: Arc<[T]> },
}

pub(crate) struct Arg<T> {
    pub(crate) node: Option<NodeId>,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<[T]>,
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<Arg<T>>,
    pub(crate) out_shape: Vec<usize>,
    pub(crate) out_data: Arc<[T]>,
}

/// Append-only record of tracked operations. Node ids are topologically
/// ordered by construction, so the backward pass is a single reverse sweep.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a tracked leaf. Gradients accumulate on the
    /// returned handle; the original stays untracked.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Tensor<T>> {
        if !t.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            out_shape: t.shape.clone(),
            out_data: t.data.clone(),
        });
        Ok(Tensor { shape: t.shape.clone(), data: t.data.clone(), node: Some(id) })
    }

    pub(crate) fn record(
        &mut self,
        name: &'static str,
        op: Op<T>,
        inputs: &[&Tensor<T>],
        out_shape: Vec<usize>,
        out_data: Vec<T>,
    ) -> Result<Tensor<T>> {
        if !out_data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let data: Arc<[T]> = out_data.into();
        if inputs.iter().all(|t| t.node.is_none()) {
            return Ok(Tensor { shape: out_shape, data, node: None });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs: inputs
                .iter()
                .map(|t| Arg { node: t.node, shape: t.shape.clone(), data: t.data.clone() })
                .collect(),
            out_shape: out_shape.clone(),
            out_data: data.clone(),
        });
        Ok(Tensor { shape: out_shape, data, node: Some(id) })
    }

    // ── Elementwise ops ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, data) = binary_broadcast(a, b, |x, y| x + y)?;
        self.record("add", Op::Add, &[a, b], shape, data)
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, data) = binary_broadcast(a, b, |x, y| x - y)?;
        self.record("sub", Op::Sub, &[a, b], shape, data)
    }

    /// Elementwise product with standard broadcasting.
    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, data) = binary_broadcast(a, b, |x, y| x * y)?;
        self.record("mul", Op::Mul, &[a, b], shape, data)
    }

    /// `a * x + b` with scalar coefficients.
    pub fn affine(&mut self, x: &Tensor<T>, a: T, b: T) -> Result<Tensor<T>> {
        let data = x.data.iter().map(|&v| a * v + b).collect();
        self.record("affine", Op::Affine { a }, &[x], x.shape.clone(), data)
    }

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let data = x.data.iter().map(|&v| sigmoid_stable(v)).collect();
        self.record("sigmoid", Op::Sigmoid, &[x], x.shape.clone(), data)
    }

    pub fn tanh(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let data = x.data.iter().map(|&v| v.tanh()).collect();
        self.record("tanh", Op::Tanh, &[x], x.shape.clone(), data)
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let data = x.data.iter().map(|&v| v.maxv(T::ZERO)).collect();
        self.record("relu", Op::Relu, &[x], x.shape.clone(), data)
    }

    pub fn leaky_relu(&mut self, x: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
        let data = x
            .data
            .iter()
            .map(|&v| if v > T::ZERO { v } else { slope * v })
            .collect();
        self.record("leaky_relu", Op::LeakyRelu { slope }, &[x], x.shape.clone(), data)
    }

    pub fn abs(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let data = x.data.iter().map(|&v| v.abs()).collect();
        self.record("abs", Op::Abs, &[x], x.shape.clone(), data)
    }

    // ── Structure ops ────────────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = *parts.first().ok_or_else(|| Error::Shape {
            op: "concat",
            detail: "empty input list".into(),
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("incompatible shapes {:?} and {:?}", first.shape, p.shape),
                });
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        self.record("concat", Op::Concat { axis }, parts, out_shape, data)
    }

    // ── Full reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = T::ZERO;
        for &v in x.data.iter() {
            s += v;
        }
        self.record("sum_all", Op::SumAll, &[x], vec![1], vec![s])
    }

    pub fn mean_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.numel() == 0 {
            return Err(Error::Shape { op: "mean_all", detail: "empty tensor".into() });
        }
        let mut s = T::ZERO;
        for &v in x.data.iter() {
            s += v;
        }
        let m = s / T::from_usize(x.numel());
        self.record("mean_all", Op::MeanAll, &[x], vec![1], vec![m])
    }

    // ── Backward ─────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Every node is visited at most once;
    /// nodes outside the root's ancestry are skipped. Constants never receive
    /// gradients; tracked leaves the root does not depend on simply stay absent
    /// from the map (query with [`GradMap::wrt_or_zeros`]).
    pub fn backward(&self, root: &Tensor<T>) -> Result<GradMap<T>> {
        let rid = root.node.ok_or_else(|| Error::Shape {
            op: "backward",
            detail: "root is not tracked on this tape".into(),
        })?;
        if rid >= self.nodes.len() {
            return Err(Error::Shape { op: "backward", detail: "root from another tape".into() });
        }
        if root.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("root must be scalar, got shape {:?}", root.shape),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[rid] = Some(vec![T::ONE]);

        for id in (0..=rid).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backward_node(node, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }
        Ok(GradMap { grads })
    }

    fn backward_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                let [a, b] = two(&node.inputs);
                if a.node.is_some() {
                    accumulate(grads, a.node, kernels::reduce_broadcast(gout, &node.out_shape, &a.shape));
                }
                if b.node.is_some() {
                    accumulate(grads, b.node, kernels::reduce_broadcast(gout, &node.out_shape, &b.shape));
                }
            }
            Op::Sub => {
                let [a, b] = two(&node.inputs);
                if a.node.is_some() {
                    accumulate(grads, a.node, kernels::reduce_broadcast(gout, &node.out_shape, &a.shape));
                }
                if b.node.is_some() {
                    let neg: Vec<T> = gout.iter().map(|&g| -g).collect();
                    accumulate(grads, b.node, kernels::reduce_broadcast(&neg, &node.out_shape, &b.shape));
                }
            }
            Op::Mul => {
                let [a, b] = two(&node.inputs);
                if a.node.is_some() {
                    let prod = kernels::broadcast_mul_into(gout, &node.out_shape, &b.data, &b.shape);
                    accumulate(grads, a.node, kernels::reduce_broadcast(&prod, &node.out_shape, &a.shape));
                }
                if b.node.is_some() {
                    let prod = kernels::broadcast_mul_into(gout, &node.out_shape, &a.data, &a.shape);
                    accumulate(grads, b.node, kernels::reduce_broadcast(&prod, &node.out_shape, &b.shape));
                }
            }
            Op::Affine { a } => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    accumulate(grads, x.node, gout.iter().map(|&g| *a * g).collect());
                }
            }
            Op::Sigmoid => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    let y = &node.out_data;
                    let dx = gout
                        .iter()
                        .zip(y.iter())
                        .map(|(&g, &y)| g * y * (T::ONE - y))
                        .collect();
                    accumulate(grads, x.node, dx);
                }
            }
            Op::Tanh => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    let y = &node.out_data;
                    let dx = gout
                        .iter()
                        .zip(y.iter())
                        .map(|(&g, &y)| g * (T::ONE - y * y))
                        .collect();
                    accumulate(grads, x.node, dx);
                }
            }
            Op::Relu => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    let dx = gout
                        .iter()
                        .zip(x.data.iter())
                        .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                        .collect();
                    accumulate(grads, x.node, dx);
                }
            }
            Op::LeakyRelu { slope } => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    let dx = gout
                        .iter()
                        .zip(x.data.iter())
                        .map(|(&g, &v)| if v > T::ZERO { g } else { *slope * g })
                        .collect();
                    accumulate(grads, x.node, dx);
                }
            }
            Op::Abs => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    let dx = gout
                        .iter()
                        .zip(x.data.iter())
                        .map(|(&g, &v)| {
                            if v > T::ZERO {
                                g
                            } else if v < T::ZERO {
                                -g
                            } else {
                                T::ZERO
                            }
                        })
                        .collect();
                    accumulate(grads, x.node, dx);
                }
            }
            Op::Concat { axis } => {
                let outer: usize = node.out_shape[..*axis].iter().product();
                let inner: usize = node.out_shape[*axis + 1..].iter().product();
                let total_block = node.out_shape[*axis] * inner;
                let mut offset = 0;
                for arg in &node.inputs {
                    let block = arg.shape[*axis] * inner;
                    if arg.node.is_some() {
                        let mut dx = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * total_block + offset;
                            dx.extend_from_slice(&gout[start..start + block]);
                        }
                        accumulate(grads, arg.node, dx);
                    }
                    offset += block;
                }
            }
            Op::SumAll => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    accumulate(grads, x.node, vec![gout[0]; x.data.len()]);
                }
            }
            Op::MeanAll => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    let g = gout[0] / T::from_usize(x.data.len());
                    accumulate(grads, x.node, vec![g; x.data.len()]);
                }
            }
            Op::Conv2d { stride, padding, dilation } => {
                let [x, w, b] = three(&node.inputs);
                let geom = kernels::ConvGeom::from_shapes(&x.shape, &w.shape, *stride, *padding, *dilation)
                    .expect("geometry validated at forward");
                if x.node.is_some() {
                    accumulate(grads, x.node, kernels::conv2d_dx(&geom, &w.data, gout));
                }
                if w.node.is_some() {
                    accumulate(grads, w.node, kernels::conv2d_dw(&geom, &x.data, gout));
                }
                if b.node.is_some() {
                    accumulate(grads, b.node, kernels::conv2d_db(&geom, gout));
                }
            }
            Op::ChannelMean => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    accumulate(grads, x.node, kernels::channel_mean_bwd(gout, &x.shape));
                }
            }
            Op::ChannelMax { argmax } => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    accumulate(grads, x.node, kernels::channel_max_bwd(gout, argmax, &x.shape));
                }
            }
            Op::GlobalAvgPool => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    accumulate(grads, x.node, kernels::global_avg_pool_bwd(gout, &x.shape));
                }
            }
            Op::NearestResize => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    accumulate(grads, x.node, kernels::nearest_resize_bwd(gout, &node.out_shape, &x.shape));
                }
            }
            Op::AvgPool2 => {
                let x = &node.inputs[0];
                if x.node.is_some() {
                    accumulate(grads, x.node, kernels::avg_pool2_bwd(gout, &x.shape));
                }
            }
            Op::InstanceNorm { xhat, inv_std } => {
                let [x, scale, shift] = three(&node.inputs);
                let (dx, dscale, dshift) = kernels::instance_norm_bwd(
                    gout,
                    xhat,
                    inv_std,
                    &scale.data,
                    &x.shape,
                    x.node.is_some(),
                    scale.node.is_some(),
                    shift.node.is_some(),
                );
                if x.node.is_some() {
                    accumulate(grads, x.node, dx);
                }
                if scale.node.is_some() {
                    accumulate(grads, scale.node, dscale);
                }
                if shift.node.is_some() {
                    accumulate(grads, shift.node, dshift);
                }
            }
        }
        Ok(())
    }

}

fn two<T>(inputs: &[Arg<T>]) -> [&Arg<T>; 2] {
    [&inputs[0], &inputs[1]]
}

fn three<T>(inputs: &[Arg<T>]) -> [&Arg<T>; 3] {
    [&inputs[0], &inputs[1], &inputs[2]]
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], node: Option<NodeId>, contrib: Vec<T>) {
    let Some(id) = node else { return };
    match &mut grads[id] {
        Some(g) => {
            debug_assert_eq!(g.len(), contrib.len());
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Numerically stable logistic function: never exponentiates a positive value.
pub(crate) fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn binary_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<usize>, Vec<T>)> {
    let shape = kernels::broadcast_shape(&a.shape, &b.shape)?;
    let data = kernels::binary_map(&a.data, &a.shape, &b.data, &b.shape, &shape, f);
    Ok((shape, data))
}

/// Gradients from one backward sweep, addressed by tracked tensors.
pub struct GradMap<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradMap<T> {
    /// Gradient of the root w.r.t. `t`, or `None` when `t` is untracked or the
    /// root does not depend on it.
    pub fn wrt(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let id = t.node?;
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor { shape: t.shape().to_vec(), data: g.clone().into(), node: None })
    }

    /// Like [`GradMap::wrt`], but an untouched tracked tensor yields zeros.
    pub fn wrt_or_zeros(&self, t: &Tensor<T>) -> Tensor<T> {
        self.wrt(t).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
    }
}
