//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! execution order, so the node list is already topologically sorted and
//! backward is a single reverse sweep.

use std::collections::HashMap;

use crate::attention::kernel as axial;
use crate::error::{Error, Result};

use super::kernels::{self, BatchStats, BN_MOMENTUM};
use super::{ParamId, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batchnorm behaviour: batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Operation tag of a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Variable,
    Param,
    MatMul,
    Add,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    Softmax,
    Sum,
    Mean,
    Reshape,
    Conv2d,
    BatchNorm,
    Resize,
    TransposeHw,
    SliceChannels,
    ConcatChannels,
    Crop,
    MergePatches,
    Bce,
    AxialAttention,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Input,
        OpKind::Variable,
        OpKind::Param,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::Resize,
        OpKind::TransposeHw,
        OpKind::SliceChannels,
        OpKind::ConcatChannels,
        OpKind::Crop,
        OpKind::MergePatches,
        OpKind::Bce,
        OpKind::AxialAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Variable => "variable",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batchnorm2d",
            OpKind::Resize => "upsample",
            OpKind::TransposeHw => "transpose",
            OpKind::SliceChannels => "slice_channels",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Crop => "crop",
            OpKind::MergePatches => "merge_patches",
            OpKind::Bce => "bce",
            OpKind::AxialAttention => "axial_attention",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Parameter ids of one batch normalization layer.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

enum Op<T> {
    Input,
    Variable,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BatchStats<T>,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Resize(NodeId),
    TransposeHw(NodeId),
    SliceChannels {
        x: NodeId,
        start: usize,
    },
    ConcatChannels(Vec<NodeId>),
    Crop {
        x: NodeId,
        top: usize,
        left: usize,
    },
    MergePatches {
        parts: Vec<NodeId>,
        grid: usize,
    },
    Bce {
        pred: NodeId,
        target: Tensor<T>,
    },
    Axial {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        tables: Option<[NodeId; 3]>,
        gates: Option<[NodeId; 4]>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Variable => OpKind::Variable,
            Op::Param => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => OpKind::BatchNorm,
            Op::Resize(_) => OpKind::Resize,
            Op::TransposeHw(_) => OpKind::TransposeHw,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::ConcatChannels(_) => OpKind::ConcatChannels,
            Op::Crop { .. } => OpKind::Crop,
            Op::MergePatches { .. } => OpKind::MergePatches,
            Op::Bce { .. } => OpKind::Bce,
            Op::Axial { .. } => OpKind::AxialAttention,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

struct RunningUpdate<T> {
    mean_id: ParamId,
    var_id: ParamId,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Recorded computation for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: HashMap<ParamId, NodeId>,
    running_updates: Vec<RunningUpdate<T>>,
    mode: Mode,
    fault: Option<OpKind>,
}

/// Numerical bound applied to predictions before the logarithms of the BCE.
pub const BCE_CLAMP: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
            running_updates: Vec::new(),
            mode,
            fault: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Gradient of the last backward pass with respect to `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Test hook: perturb every gradient emitted by ops of `kind` during backward.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Free leaf whose gradient is retained and readable through [`Graph::grad`].
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Variable, true)
    }

    /// Bring a parameter onto the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let p = store.get(id);
        let node = self.push(p.value.clone(), Op::Param, p.trainable);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb || self.value(b).numel() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::mismatch(op, sa, sb))
        }
    }

    fn binary(&mut self, a: NodeId, b: NodeId, mul: bool) -> Result<NodeId> {
        let shape = self.binary_shapes(if mul { "mul" } else { "add" }, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let at = |t: &Tensor<T>, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|i| {
                let (x, y) = (at(va, i), at(vb, i));
                if mul {
                    x * y
                } else {
                    x + y
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let op = if mul { Op::Mul(a, b) } else { Op::Add(a, b) };
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    /// Elementwise sum; either operand may be a single-element tensor.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, false)
    }

    /// Elementwise product; either operand may be a single-element tensor.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let out = kernels::softmax(self.value(a), axis)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::from_usize(v.numel()));
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// In training mode the batch statistics normalize the output and are
    /// queued as running-statistic updates (see [`Graph::apply_running_updates`]).
    /// In evaluation mode the stored running statistics are used.
    pub fn batchnorm2d(&mut self, store: &ParamStore<T>, x: NodeId, bn: &BatchNormParams) -> Result<NodeId> {
        let gamma = self.param(store, bn.gamma);
        let beta = self.param(store, bn.beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        match self.mode {
            Mode::Train => {
                let (out, stats) = kernels::batchnorm_train(self.value(x), self.value(gamma), self.value(beta))?;
                self.running_updates.push(RunningUpdate {
                    mean_id: bn.running_mean,
                    var_id: bn.running_var,
                    mean: stats.mean.clone(),
                    var: stats.var_unbiased.clone(),
                });
                Ok(self.push(out, Op::BatchNormTrain { x, gamma, beta, stats }, rg))
            }
            Mode::Eval => {
                let (rm, rv) = (store.value(bn.running_mean), store.value(bn.running_var));
                let (out, inv_std) = kernels::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), rm, rv)?;
                let c = inv_std.len();
                let plane = out.numel() / (out.shape()[0] * c);
                let xhat = self
                    .value(x)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = (i / plane) % c;
                        (v - rm.data()[ch]) * inv_std[ch]
                    })
                    .collect();
                Ok(self.push(
                    out,
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                    rg,
                ))
            }
        }
    }

    /// Fold queued batch statistics into the running estimates, in recording order.
    pub fn apply_running_updates(&mut self, store: &mut ParamStore<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        for u in self.running_updates.drain(..) {
            for (id, batch) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
                for (r, &b) in store.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    /// Bilinear resampling (half-pixel centers) to `(out_h, out_w)`.
    pub fn resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let out = kernels::resize_bilinear(self.value(x), out_h, out_w)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Resize(x), rg))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, _, h, w) = self.value(x).dims4()?;
        self.resize(x, 2 * h, 2 * w)
    }

    /// `(N, C, H, W) -> (N, C, W, H)`.
    pub fn transpose_hw(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::transpose_hw(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::TransposeHw(x), rg))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let from = (b * c + start) * plane;
            out.extend_from_slice(&xd[from..from + len * plane]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, len, h, w], out),
            Op::SliceChannels { x, start },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::mismatch("concat_channels", self.value(first).shape(), self.value(p).shape()));
            }
            total += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![n, total, h, w], out),
            Op::ConcatChannels(parts.to_vec()),
            rg,
        ))
    }

    pub fn crop(&mut self, x: NodeId, top: usize, left: usize, h: usize, w: usize) -> Result<NodeId> {
        let out = kernels::crop(self.value(x), top, left, h, w)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Crop { x, top, left }, rg))
    }

    /// Place `grid * grid` equally shaped patches (row-major) into one map.
    pub fn merge_patches(&mut self, parts: &[NodeId], grid: usize) -> Result<NodeId> {
        if grid == 0 || parts.len() != grid * grid {
            return Err(Error::invalid(
                "merge_patches",
                format!("expected {} patches for grid {grid}, got {}", grid * grid, parts.len()),
            ));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        let (n, c, ph, pw) = self.value(parts[0]).dims4()?;
        for &p in parts {
            if self.value(p).shape() != shape {
                return Err(Error::mismatch("merge_patches", &shape, self.value(p).shape()));
            }
        }
        let mut out = Tensor::from_parts(
            vec![n, c, ph * grid, pw * grid],
            vec![T::zero(); n * c * ph * pw * grid * grid],
        );
        for (idx, &p) in parts.iter().enumerate() {
            kernels::paste_add(&mut out, self.value(p), (idx / grid) * ph, (idx % grid) * pw);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::MergePatches {
                parts: parts.to_vec(),
                grid,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy between probabilities `pred` and a binary `target`.
    ///
    /// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logs.
    pub fn bce_loss(&mut self, pred: NodeId, target: Tensor<T>) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::mismatch("bce_loss", pv.shape(), target.shape()));
        }
        let (lo, hi) = (T::from_f64(BCE_CLAMP), T::one() - T::from_f64(BCE_CLAMP));
        let mut total = T::zero();
        for (&p, &t) in pv.data().iter().zip(target.data()) {
            let p = p.max(lo).min(hi);
            total -= t * p.ln() + (T::one() - t) * (T::one() - p).ln();
        }
        let out = Tensor::scalar(total / T::from_usize(pv.numel()));
        let rg = self.rg(pred);
        Ok(self.push(out, Op::Bce { pred, target }, rg))
    }

    /// Single-head axial attention over the last axis of `(N, D, H, L)` inputs.
    ///
    /// `tables` are the `(2L-1, D)` relative tables `[r_q, r_k, r_v]`; `gates`
    /// are single-element nodes `[G_Q, G_K, G_V1, G_V2]` and require tables.
    pub fn axial_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        tables: Option<[NodeId; 3]>,
        gates: Option<[NodeId; 4]>,
    ) -> Result<NodeId> {
        let tv = tables.map(|t| t.map(|id| self.value(id)));
        let gv = gates.map(|g| g.map(|id| self.value(id).item()));
        let (out, probs) = axial::forward(self.value(q), self.value(k), self.value(v), tv, gv)?;
        let rg = [q, k, v].iter().any(|&i| self.rg(i))
            || tables.is_some_and(|t| t.iter().any(|&i| self.rg(i)))
            || gates.is_some_and(|g| g.iter().any(|&i| self.rg(i)));
        Ok(self.push(
            out,
            Op::Axial {
                q,
                k,
                v,
                tables,
                gates,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Gradients of trainable parameters are added (`+=`) to their `grad`
    /// in `store`; calling twice without zeroing accumulates.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![T::one()]));
        let fault = self.fault;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut out = Contrib {
                nodes: &self.nodes,
                grads: &mut grads,
                scale: (fault == Some(node.op.kind())).then(|| T::from_f64(1.1)),
            };
            backward_node(node, &gy, &mut out);
            grads[i] = Some(gy);
        }
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = &grads[node.0] {
                let p = store.get_mut(pid);
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Sink for the input gradients produced by one node's backward rule.
struct Contrib<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    scale: Option<T>,
}

impl<T: Scalar> Contrib<'_, T> {
    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn add(&mut self, id: NodeId, mut g: Tensor<T>) {
        if !self.wants(id) {
            return;
        }
        if let Some(s) = self.scale {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }
}

/// Reduce `g` to the shape of operand `id` (sums when the operand was broadcast).
fn unbroadcast<T: Scalar>(g: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        Tensor::from_parts(target.shape().to_vec(), vec![g.sum()])
    }
}

fn backward_node<T: Scalar>(node: &Node<T>, gy: &Tensor<T>, out: &mut Contrib<'_, T>) {
    let y = &node.value;
    match &node.op {
        Op::Input | Op::Variable | Op::Param => {}
        Op::MatMul(a, b) => {
            let (da, db) = kernels::matmul_backward(out.val(*a), out.val(*b), gy);
            out.add(*a, da);
            out.add(*b, db);
        }
        Op::Add(a, b) => {
            let da = unbroadcast(gy, out.val(*a));
            let db = unbroadcast(gy, out.val(*b));
            out.add(*a, da);
            out.add(*b, db);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (out.val(*a), out.val(*b));
            let at = |t: &Tensor<T>, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
            let ga = Tensor::from_parts(
                gy.shape().to_vec(),
                gy.data().iter().enumerate().map(|(i, &g)| g * at(vb, i)).collect(),
            );
            let gb = Tensor::from_parts(
                gy.shape().to_vec(),
                gy.data().iter().enumerate().map(|(i, &g)| g * at(va, i)).collect(),
            );
            let (da, db) = (unbroadcast(&ga, va), unbroadcast(&gb, vb));
            out.add(*a, da);
            out.add(*b, db);
        }
        Op::Scale(a, s) => out.add(*a, gy.map(|g| g * *s)),
        Op::Relu(a) => {
            let x = out.val(*a);
            let d = x
                .data()
                .iter()
                .zip(gy.data())
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            out.add(*a, Tensor::from_parts(x.shape().to_vec(), d));
        }
        Op::Sigmoid(a) => {
            let d = y
                .data()
                .iter()
                .zip(gy.data())
                .map(|(&s, &g)| g * s * (T::one() - s))
                .collect();
            out.add(*a, Tensor::from_parts(y.shape().to_vec(), d));
        }
        Op::Softmax(a, axis) => out.add(*a, kernels::softmax_backward(y, gy, *axis)),
        Op::Sum(a) => {
            let shape = out.val(*a).shape().to_vec();
            out.add(*a, Tensor::full(shape, gy.item()).expect("valid shape"));
        }
        Op::Mean(a) => {
            let v = out.val(*a);
            let g = gy.item() / T::from_usize(v.numel());
            let shape = v.shape().to_vec();
            out.add(*a, Tensor::full(shape, g).expect("valid shape"));
        }
        Op::Reshape(a) => {
            let shape = out.val(*a).shape().to_vec();
            out.add(*a, gy.clone().reshape(shape).expect("same numel"));
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let need_dx = out.wants(*x);
            let (dx, dw, db) =
                kernels::conv2d_backward(out.val(*x), out.val(*w), b.is_some(), *stride, *pad, gy, need_dx);
            if let Some(dx) = dx {
                out.add(*x, dx);
            }
            out.add(*w, dw);
            if let (Some(b), Some(db)) = (b, db) {
                out.add(*b, db);
            }
        }
        Op::BatchNormTrain { x, gamma, beta, stats } => {
            let (dx, dg, db) = kernels::batchnorm_train_backward(y.shape(), out.val(*gamma), stats, gy);
            out.add(*x, dx);
            out.add(*gamma, dg);
            out.add(*beta, db);
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = inv_std.len();
            let plane = y.numel() / (y.shape()[0] * c);
            let gv = out.val(*gamma).data().to_vec();
            let mut dx = vec![T::zero(); y.numel()];
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for (i, &g) in gy.data().iter().enumerate() {
                let ch = (i / plane) % c;
                dx[i] = g * gv[ch] * inv_std[ch];
                dg[ch] += g * xhat[i];
                db[ch] += g;
            }
            out.add(*x, Tensor::from_parts(y.shape().to_vec(), dx));
            out.add(*gamma, Tensor::from_parts(vec![c], dg));
            out.add(*beta, Tensor::from_parts(vec![c], db));
        }
        Op::Resize(a) => {
            let shape = out.val(*a).shape().to_vec();
            out.add(*a, kernels::resize_bilinear_backward(&shape, gy));
        }
        Op::TransposeHw(a) => out.add(*a, kernels::transpose_hw(gy).expect("rank 4")),
        Op::SliceChannels { x, start } => {
            let xv = out.val(*x);
            let (n, c, h, w) = xv.dims4().expect("rank 4");
            let len = y.shape()[1];
            let plane = h * w;
            let mut d = vec![T::zero(); xv.numel()];
            for b in 0..n {
                let to = (b * c + start) * plane;
                d[to..to + len * plane].copy_from_slice(&gy.data()[b * len * plane..(b + 1) * len * plane]);
            }
            out.add(*x, Tensor::from_parts(vec![n, c, h, w], d));
        }
        Op::ConcatChannels(parts) => {
            let (n, total, h, w) = y.dims4().expect("rank 4");
            let plane = h * w;
            let mut offset = 0;
            for &p in parts {
                let c = out.val(p).shape()[1];
                let mut d = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    let from = (b * total + offset) * plane;
                    d.extend_from_slice(&gy.data()[from..from + c * plane]);
                }
                out.add(p, Tensor::from_parts(vec![n, c, h, w], d));
                offset += c;
            }
        }
        Op::Crop { x, top, left } => {
            let mut d = out.val(*x).zeros_like();
            kernels::paste_add(&mut d, gy, *top, *left);
            out.add(*x, d);
        }
        Op::MergePatches { parts, grid } => {
            let (_, _, ph, pw) = out.val(parts[0]).dims4().expect("rank 4");
            for (idx, &p) in parts.iter().enumerate() {
                let d = kernels::crop(gy, (idx / grid) * ph, (idx % grid) * pw, ph, pw).expect("in bounds");
                out.add(p, d);
            }
        }
        Op::Bce { pred, target } => {
            let pv = out.val(*pred);
            let (lo, hi) = (T::from_f64(BCE_CLAMP), T::one() - T::from_f64(BCE_CLAMP));
            let scale = gy.item() / T::from_usize(pv.numel());
            // Derivative evaluated at the clamped value so saturated outputs still
            // receive a corrective signal.
            let d = pv
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| {
                    let p = p.max(lo).min(hi);
                    scale * ((T::one() - t) / (T::one() - p) - t / p)
                })
                .collect();
            out.add(*pred, Tensor::from_parts(pv.shape().to_vec(), d));
        }
        Op::Axial {
            q,
            k,
            v,
            tables,
            gates,
            probs,
        } => {
            let tv = tables.map(|t| t.map(|id| out.val(id)));
            let gv = gates.map(|g| g.map(|id| out.val(id).item()));
            let g = axial::backward(out.val(*q), out.val(*k), out.val(*v), tv, gv, probs, gy);
            let tables = *tables;
            let gates = *gates;
            out.add(*q, g.dq);
            out.add(*k, g.dk);
            out.add(*v, g.dv);
            if let (Some(ids), Some(dt)) = (tables, g.dtables) {
                for (id, d) in ids.into_iter().zip(dt) {
                    out.add(id, d);
                }
            }
            if let Some(ids) = gates {
                for (id, d) in ids.into_iter().zip(g.dgates) {
                    let shape = out.val(id).shape().to_vec();
                    out.add(id, Tensor::from_parts(shape, vec![d]));
                }
            }
        }
    }
}

#[cfg(test)]
#[path = "graph_tests.rs"]
mod tests;
