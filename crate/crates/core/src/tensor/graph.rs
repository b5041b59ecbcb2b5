//! Append-only operation tape with reverse-mode gradient replay.

use super::{
    bcast_strides, broadcast_shape, row_major_strides, zip_broadcast, Result, Tensor, TensorError,
};

/// Handle to a node on the tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    PowScalar(NodeId, f64),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Matmul(NodeId, NodeId),
    Sum {
        input: NodeId,
        axes: Vec<usize>,
        keep: bool,
    },
    Mean {
        input: NodeId,
        axes: Vec<usize>,
        keep: bool,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        input: NodeId,
    },
    Permute {
        input: NodeId,
        perm: Vec<usize>,
    },
    IndexSelect {
        input: NodeId,
        axis: usize,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation: one graph per forward/backward cycle.
///
/// Nodes are appended in execution order; `backward` walks them in strict
/// reverse append order. Gradients accumulate additively across repeated
/// `backward` calls until `zero_grads`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor that never tracks gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Constant, value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Insert an input tensor; gradient is tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push_unchecked(Op::Leaf, value, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Re-insert the value of `id` as a fresh constant (gradient barrier).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.constant(v)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        self.nodes.len() - 1
    }

    /// Every successful op must leave only finite values behind.
    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::Domain {
                op: name,
                message: "non-finite result".into(),
            });
        }
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    // ── Elementwise binary ops ──────────────────────────────────────

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                context: name.to_string(),
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            }
        })?;
        let sa = bcast_strides(va.shape(), &out_shape);
        let sb = bcast_strides(vb.shape(), &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        {
            let (da, db) = (va.data(), vb.data());
            zip_broadcast(&out_shape, &sa, &sb, |i, oa, ob| {
                out[i] = f(da[oa], db[ob]);
            });
        }
        let requires = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        self.push(make(a, b), Tensor::new(out_shape, out)?, requires, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    // ── Elementwise unary ops ───────────────────────────────────────

    fn unary(
        &mut self,
        a: NodeId,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        let data: Vec<f64> = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let requires = self.nodes[a].requires_grad;
        self.push(op, value, requires, name)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "neg", |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.data().iter().any(|&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                message: "operand must be strictly positive".into(),
            });
        }
        self.unary(a, "log", f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "relu", |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.unary(a, "pow_scalar", |x| x.powf(p), Op::PowScalar(a, p))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, "mul_scalar", |x| x * c, Op::MulScalar(a, c))
    }

    // ── Matmul ──────────────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`;
    /// leading dimensions broadcast.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa_full, sb_full) = (va.shape(), vb.shape());
        if sa_full.len() < 2 || sb_full.len() < 2 {
            return Err(TensorError::Contract(format!(
                "matmul operands must have rank >= 2, got {:?} and {:?}",
                sa_full, sb_full
            )));
        }
        let (m, k) = (sa_full[sa_full.len() - 2], sa_full[sa_full.len() - 1]);
        let (k2, n) = (sb_full[sb_full.len() - 2], sb_full[sb_full.len() - 1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                context: "matmul inner dimension".into(),
                lhs: sa_full.to_vec(),
                rhs: sb_full.to_vec(),
            });
        }
        let batch_a = &sa_full[..sa_full.len() - 2];
        let batch_b = &sb_full[..sb_full.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b).ok_or_else(|| TensorError::ShapeMismatch {
            context: "matmul batch dimensions".into(),
            lhs: sa_full.to_vec(),
            rhs: sb_full.to_vec(),
        })?;
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);

        let stride_a = bcast_strides(batch_a, &batch);
        let stride_b = bcast_strides(batch_b, &batch);
        let mut out = vec![0.0; out_shape.iter().product()];
        {
            let (da, db) = (va.data(), vb.data());
            zip_broadcast(&batch, &stride_a, &stride_b, |bi, oa, ob| {
                matmul_2d_acc(
                    &da[oa * m * k..oa * m * k + m * k],
                    &db[ob * k * n..ob * k * n + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            });
        }
        let requires = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        self.push(Op::Matmul(a, b), Tensor::new(out_shape, out)?, requires, "matmul")
    }

    // ── Reductions ──────────────────────────────────────────────────

    fn check_axes(&self, id: NodeId, axes: &[usize]) -> Result<()> {
        let rank = self.nodes[id].value.rank();
        for &ax in axes {
            if ax >= rank {
                return Err(TensorError::AxisOutOfRange { axis: ax, rank });
            }
        }
        Ok(())
    }

    fn reduce(
        &mut self,
        a: NodeId,
        axes: &[usize],
        keep: bool,
        mean: bool,
        name: &'static str,
    ) -> Result<NodeId> {
        self.check_axes(a, axes)?;
        let va = &self.nodes[a].value;
        let in_shape = va.shape().to_vec();
        let mut keep_shape = in_shape.clone();
        let mut count = 1usize;
        for &ax in axes {
            count *= keep_shape[ax];
            keep_shape[ax] = 1;
        }
        let scale = if mean { 1.0 / count.max(1) as f64 } else { 1.0 };
        let mut out = vec![0.0; keep_shape.iter().product()];
        {
            let s_out = bcast_strides(&keep_shape, &in_shape);
            let s_in = row_major_strides(&in_shape);
            let data = va.data();
            zip_broadcast(&in_shape, &s_out, &s_in, |_, oo, oi| {
                out[oo] += data[oi];
            });
        }
        if mean {
            for v in &mut out {
                *v *= scale;
            }
        }
        let out_shape = if keep {
            keep_shape
        } else {
            squeeze_axes(&in_shape, axes)
        };
        let requires = self.nodes[a].requires_grad;
        let op = if mean {
            Op::Mean {
                input: a,
                axes: axes.to_vec(),
                keep,
            }
        } else {
            Op::Sum {
                input: a,
                axes: axes.to_vec(),
                keep,
            }
        };
        self.push(op, Tensor::new(out_shape, out)?, requires, name)
    }

    pub fn sum(&mut self, a: NodeId, axes: &[usize], keep: bool) -> Result<NodeId> {
        self.reduce(a, axes, keep, false, "sum")
    }

    pub fn mean(&mut self, a: NodeId, axes: &[usize], keep: bool) -> Result<NodeId> {
        self.reduce(a, axes, keep, true, "mean")
    }

    /// Sum of all elements, producing a scalar (shape `[]`).
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.nodes[a].value.rank()).collect();
        self.sum(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.nodes[a].value.rank()).collect();
        self.mean(a, &axes, false)
    }

    // ── Structural ops ──────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let first = self.nodes[inputs[0]].value.shape().to_vec();
        self.check_axes(inputs[0], &[axis])?;
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.nodes[id].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(TensorError::ShapeMismatch {
                    context: format!("concat along axis {axis}"),
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let row = axis_total * inner;
        let mut col_off = 0usize;
        for &id in inputs {
            let v = &self.nodes[id].value;
            let ext = v.shape()[axis];
            let block = ext * inner;
            for o in 0..outer {
                let src = &v.data()[o * block..(o + 1) * block];
                out[o * row + col_off..o * row + col_off + block].copy_from_slice(src);
            }
            col_off += block;
        }
        let requires = inputs.iter().any(|&id| self.nodes[id].requires_grad);
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            Tensor::new(out_shape, out)?,
            requires,
            "concat",
        )
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check_axes(a, &[axis])?;
        let va = &self.nodes[a].value;
        let shape = va.shape();
        if start + len > shape[axis] {
            return Err(TensorError::Contract(format!(
                "slice [{start}, {}) exceeds axis {axis} extent {}",
                start + len,
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &va.data()[(o * ext + start) * inner..(o * ext + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let requires = self.nodes[a].requires_grad;
        self.push(
            Op::Slice {
                input: a,
                axis,
                start,
                len,
            },
            Tensor::new(out_shape, out)?,
            requires,
            "slice",
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        let numel: usize = shape.iter().product();
        if numel != va.numel() {
            return Err(TensorError::ShapeMismatch {
                context: "reshape".into(),
                lhs: va.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        let requires = self.nodes[a].requires_grad;
        self.push(Op::Reshape { input: a }, value, requires, "reshape")
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        let rank = va.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Contract(format!(
                "invalid permutation {:?} for rank {rank}",
                perm
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| va.shape()[p]).collect();
        let in_strides = row_major_strides(va.shape());
        let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = vec![0.0; va.numel()];
        let zeros = vec![0usize; rank];
        {
            let data = va.data();
            zip_broadcast(&out_shape, &mapped, &zeros, |i, oi, _| {
                out[i] = data[oi];
            });
        }
        let requires = self.nodes[a].requires_grad;
        self.push(
            Op::Permute {
                input: a,
                perm: perm.to_vec(),
            },
            Tensor::new(out_shape, out)?,
            requires,
            "permute",
        )
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let rank = self.nodes[a].value.rank();
        if rank < 2 {
            return Err(TensorError::Contract(
                "transpose_last2 needs rank >= 2".into(),
            ));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Gather positions along an axis; indices may repeat.
    pub fn index_select(&mut self, a: NodeId, axis: usize, indices: &[usize]) -> Result<NodeId> {
        self.check_axes(a, &[axis])?;
        let va = &self.nodes[a].value;
        let shape = va.shape();
        let ext = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&ix| ix >= ext) {
            return Err(TensorError::Contract(format!(
                "index {bad} out of range for axis {axis} extent {ext}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();
        let mut out = vec![0.0; outer * indices.len() * inner];
        for o in 0..outer {
            for (j, &ix) in indices.iter().enumerate() {
                let src = &va.data()[(o * ext + ix) * inner..(o * ext + ix + 1) * inner];
                let dst_off = (o * indices.len() + j) * inner;
                out[dst_off..dst_off + inner].copy_from_slice(src);
            }
        }
        let requires = self.nodes[a].requires_grad;
        self.push(
            Op::IndexSelect {
                input: a,
                axis,
                indices: indices.to_vec(),
            },
            Tensor::new(out_shape, out)?,
            requires,
            "index_select",
        )
    }

    /// Stack along a fresh axis: each input gains an axis of extent 1,
    /// then all are concatenated.
    pub fn stack(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let mut expanded = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let mut shape = self.nodes[id].value.shape().to_vec();
            if axis > shape.len() {
                return Err(TensorError::AxisOutOfRange {
                    axis,
                    rank: shape.len() + 1,
                });
            }
            shape.insert(axis, 1);
            expanded.push(self.reshape(id, &shape)?);
        }
        self.concat(&expanded, axis)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients of this call are
    /// added onto whatever previous calls accumulated.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        local[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = local[id].take() else {
                continue;
            };
            self.propagate(id, &gout, &mut local)?;
            // fold this pass into the persistent accumulator
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&gout) {
                        *a += g;
                    }
                }
                None => node.grad = Some(gout),
            }
        }
        Ok(())
    }

    fn add_local(
        &self,
        local: &mut [Option<Vec<f64>>],
        id: NodeId,
        update: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let buf = local[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.numel()]);
        update(buf);
    }

    fn propagate(
        &self,
        id: NodeId,
        gout: &[f64],
        local: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        // clone the op descriptor to release the borrow on self.nodes
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.bcast_binary_grads(id, a, b, gout, local, |_, _| 1.0, |_, _| 1.0);
            }
            Op::Sub(a, b) => {
                self.bcast_binary_grads(id, a, b, gout, local, |_, _| 1.0, |_, _| -1.0);
            }
            Op::Mul(a, b) => {
                self.bcast_binary_grads(id, a, b, gout, local, |_, y| y, |x, _| x);
            }
            Op::Div(a, b) => {
                self.bcast_binary_grads(id, a, b, gout, local, |_, y| 1.0 / y, |x, y| -x / (y * y));
            }
            Op::Neg(a) => self.unary_grad(a, gout, local, |_, _| -1.0),
            Op::Exp(a) => {
                let out = self.nodes[id].value.data();
                self.add_local(local, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * out[i];
                    }
                });
            }
            Op::Log(a) => {
                let xin = self.nodes[a].value.data();
                self.add_local(local, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] / xin[i];
                    }
                });
            }
            Op::Tanh(a) => {
                let out = self.nodes[id].value.data();
                self.add_local(local, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[id].value.data();
                self.add_local(local, a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Relu(a) => self.unary_grad(a, gout, local, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::PowScalar(a, p) => self.unary_grad(a, gout, local, move |x, _| {
                if p == 0.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            }),
            Op::AddScalar(a, _) => self.unary_grad(a, gout, local, |_, _| 1.0),
            Op::MulScalar(a, c) => self.unary_grad(a, gout, local, move |_, _| c),
            Op::Matmul(a, b) => self.matmul_grads(a, b, gout, local)?,
            Op::Sum { input, axes, keep } | Op::Mean { input, axes, keep } => {
                let mean = matches!(self.nodes[id].op, Op::Mean { .. });
                let in_shape = self.nodes[input].value.shape().to_vec();
                let mut keep_shape = in_shape.clone();
                let mut count = 1usize;
                for &ax in &axes {
                    count *= keep_shape[ax];
                    keep_shape[ax] = 1;
                }
                let _ = keep; // gout buffer is identical for keep / squeezed shapes
                let scale = if mean { 1.0 / count.max(1) as f64 } else { 1.0 };
                let s_out = bcast_strides(&keep_shape, &in_shape);
                let s_in = row_major_strides(&in_shape);
                self.add_local(local, input, |buf| {
                    zip_broadcast(&in_shape, &s_out, &s_in, |_, oo, oi| {
                        buf[oi] += gout[oo] * scale;
                    });
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[axis] * inner;
                let mut col_off = 0usize;
                for &part in &inputs {
                    let ext = self.nodes[part].value.shape()[axis];
                    let block = ext * inner;
                    self.add_local(local, part, |buf| {
                        for o in 0..outer {
                            let src = &gout[o * row + col_off..o * row + col_off + block];
                            for (dst, g) in buf[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *dst += g;
                            }
                        }
                    });
                    col_off += block;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let in_shape = self.nodes[input].value.shape().to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let ext = in_shape[axis];
                self.add_local(local, input, |buf| {
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            buf[dst + i] += gout[src + i];
                        }
                    }
                });
            }
            Op::Reshape { input } => {
                self.add_local(local, input, |buf| {
                    for (b, g) in buf.iter_mut().zip(gout) {
                        *b += g;
                    }
                });
            }
            Op::Permute { input, perm } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let in_strides = row_major_strides(self.nodes[input].value.shape());
                let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let zeros = vec![0usize; out_shape.len()];
                self.add_local(local, input, |buf| {
                    zip_broadcast(&out_shape, &mapped, &zeros, |i, oi, _| {
                        buf[oi] += gout[i];
                    });
                });
            }
            Op::IndexSelect {
                input,
                axis,
                indices,
            } => {
                let in_shape = self.nodes[input].value.shape().to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let ext = in_shape[axis];
                self.add_local(local, input, |buf| {
                    for o in 0..outer {
                        for (j, &ix) in indices.iter().enumerate() {
                            let dst = (o * ext + ix) * inner;
                            let src = (o * indices.len() + j) * inner;
                            for i in 0..inner {
                                buf[dst + i] += gout[src + i];
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn unary_grad(
        &self,
        a: NodeId,
        gout: &[f64],
        local: &mut [Option<Vec<f64>>],
        df: impl Fn(f64, f64) -> f64,
    ) {
        let xin = self.nodes[a].value.data();
        self.add_local(local, a, |buf| {
            for i in 0..buf.len() {
                buf[i] += gout[i] * df(xin[i], 0.0);
            }
        });
    }

    /// Broadcast-aware elementwise backward: local derivative wrt each
    /// operand is a function of both operand values.
    fn bcast_binary_grads(
        &self,
        id: NodeId,
        a: NodeId,
        b: NodeId,
        gout: &[f64],
        local: &mut [Option<Vec<f64>>],
        dfa: impl Fn(f64, f64) -> f64,
        dfb: impl Fn(f64, f64) -> f64,
    ) {
        let out_shape = self.nodes[id].value.shape().to_vec();
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let sa = bcast_strides(va.shape(), &out_shape);
        let sb = bcast_strides(vb.shape(), &out_shape);
        let (da, db) = (va.data(), vb.data());
        if self.nodes[a].requires_grad {
            self.add_local(local, a, |buf| {
                zip_broadcast(&out_shape, &sa, &sb, |i, oa, ob| {
                    buf[oa] += gout[i] * dfa(da[oa], db[ob]);
                });
            });
        }
        if self.nodes[b].requires_grad {
            self.add_local(local, b, |buf| {
                zip_broadcast(&out_shape, &sa, &sb, |i, oa, ob| {
                    buf[ob] += gout[i] * dfb(da[oa], db[ob]);
                });
            });
        }
    }

    fn matmul_grads(
        &self,
        a: NodeId,
        b: NodeId,
        gout: &[f64],
        local: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa_full, sb_full) = (va.shape(), vb.shape());
        let (m, k) = (sa_full[sa_full.len() - 2], sa_full[sa_full.len() - 1]);
        let n = sb_full[sb_full.len() - 1];
        let batch_a = &sa_full[..sa_full.len() - 2];
        let batch_b = &sb_full[..sb_full.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b).expect("checked in forward");
        let stride_a = bcast_strides(batch_a, &batch);
        let stride_b = bcast_strides(batch_b, &batch);
        let (da, db) = (va.data(), vb.data());
        if self.nodes[a].requires_grad {
            self.add_local(local, a, |buf| {
                zip_broadcast(&batch, &stride_a, &stride_b, |bi, oa, ob| {
                    matmul_nt_acc(
                        &gout[bi * m * n..(bi + 1) * m * n],
                        &db[ob * k * n..ob * k * n + k * n],
                        &mut buf[oa * m * k..oa * m * k + m * k],
                        m,
                        k,
                        n,
                    );
                });
            });
        }
        if self.nodes[b].requires_grad {
            self.add_local(local, b, |buf| {
                zip_broadcast(&batch, &stride_a, &stride_b, |bi, oa, ob| {
                    matmul_tn_acc(
                        &da[oa * m * k..oa * m * k + m * k],
                        &gout[bi * m * n..(bi + 1) * m * n],
                        &mut buf[ob * k * n..ob * k * n + k * n],
                        m,
                        k,
                        n,
                    );
                });
            });
        }
        Ok(())
    }
}

fn squeeze_axes(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect()
}

/// out[i,j] += sum_p a[i,p] * b[p,j]
fn matmul_2d_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

/// dA[i,p] += sum_j g[i,j] * b[p,j]
fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            orow[p] += s;
        }
    }
}

/// dB[p,j] += sum_i a[i,p] * g[i,j]
fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * grow[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), false);
        let b = g.leaf(Tensor::from_vec(vec![3.0, 4.0]), false);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut g = Graph::new();
        let mut rng = StdRng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let a = g.leaf(x.clone(), false);
        let ones = g.constant(Tensor::ones(&[3, 4]));
        let y = g.mul(a, ones).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[4]), false);
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 0.0]), false);
        assert!(matches!(g.log(a), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0]), false);
        let b = g.leaf(Tensor::from_vec(vec![0.0]), false);
        assert!(matches!(g.div(a, b), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let mut rng = StdRng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 3]);
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let ia = g.leaf(eye, false);
        let an = g.leaf(a.clone(), false);
        let prod = g.matmul(ia, an).unwrap();
        assert_eq!(g.value(prod).data(), a.data());

        let m = g.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap(), false);
        let v = g.leaf(Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap(), false);
        let mv = g.matmul(m, v).unwrap();
        assert_eq!(g.value(mv).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(Tensor::zeros(&[4, 2]), false);
        assert!(matches!(
            g.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn sum_and_concat_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), false);
        let s = g.sum_all(a).unwrap();
        assert_eq!(g.value(s).data(), &[6.0]);

        let x = g.leaf(Tensor::zeros(&[2, 3]), false);
        let y = g.leaf(Tensor::zeros(&[2, 2]), false);
        let c = g.concat(&[x, y], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
    }

    #[test]
    fn axis_out_of_range() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(
            g.sum(a, &[2], false),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.5, -0.2, 0.9, 0.1]), true);
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(
            g.backward(x),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn backward_of_square_sum_is_2x() {
        let mut g = Graph::new();
        let xv = vec![0.5, -0.2, 0.9];
        let x = g.leaf(Tensor::from_vec(xv.clone()), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        for (gv, xvi) in grad.iter().zip(&xv) {
            assert!((gv - 2.0 * xvi).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn tanh_gradient_matches_central_difference() {
        let x0 = 0.3;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(x0), true);
        let y = g.tanh(x).unwrap();
        g.backward(y).unwrap();
        let analytic = g.grad(x).unwrap()[0];
        let numeric = central_diff(
            |v| {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::scalar(v[0]), false);
                let y = g.tanh(x).unwrap();
                g.value(y).data()[0]
            },
            &[x0],
            1e-5,
        )[0];
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
        assert!(rel < 1e-8, "rel err {rel}");
    }

    // Every differentiable op against central finite differences on
    // random inputs in [-1, 1], 20 seeds.
    #[test]
    fn gradcheck_all_ops_20_seeds() {
        for seed in 0..20u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let a0 = rand_tensor(&mut rng, &[2, 3]);
            let b0 = rand_tensor(&mut rng, &[2, 3]);
            // keep away from relu kink and div-by-near-zero
            let b0 = Tensor::new(
                b0.shape().to_vec(),
                b0.data()
                    .iter()
                    .map(|&v| if v.abs() < 0.2 { 0.3 + v } else { v })
                    .collect(),
            )
            .unwrap();

            type BuildFn = fn(&mut Graph, NodeId, NodeId) -> NodeId;
            let cases: Vec<(&str, BuildFn)> = vec![
                ("add", |g, a, b| g.add(a, b).unwrap()),
                ("sub", |g, a, b| g.sub(a, b).unwrap()),
                ("mul", |g, a, b| g.mul(a, b).unwrap()),
                ("div", |g, a, b| g.div(a, b).unwrap()),
                ("neg", |g, a, _| g.neg(a).unwrap()),
                ("exp", |g, a, _| g.exp(a).unwrap()),
                ("tanh", |g, a, _| g.tanh(a).unwrap()),
                ("sigmoid", |g, a, _| g.sigmoid(a).unwrap()),
                ("relu", |g, a, b| {
                    let shifted = g.add(a, b).unwrap(); // bias away from 0
                    g.relu(shifted).unwrap()
                }),
                ("pow2", |g, a, _| g.pow_scalar(a, 2.0).unwrap()),
                ("matmul", |g, a, b| {
                    let bt = g.transpose_last2(b).unwrap();
                    g.matmul(a, bt).unwrap()
                }),
                ("mean", |g, a, _| g.mean(a, &[1], false).unwrap()),
                ("slice", |g, a, _| g.slice(a, 1, 1, 2).unwrap()),
                ("permute", |g, a, _| g.permute(a, &[1, 0]).unwrap()),
                ("index_select", |g, a, _| {
                    g.index_select(a, 1, &[2, 0, 2]).unwrap()
                }),
                ("concat", |g, a, b| g.concat(&[a, b], 0).unwrap()),
                ("stack", |g, a, b| g.stack(&[a, b], 1).unwrap()),
            ];

            for (name, build) in cases {
                let run = |av: &[f64], bv: &[f64]| -> f64 {
                    let mut g = Graph::new();
                    let a = g.leaf(Tensor::new(vec![2, 3], av.to_vec()).unwrap(), false);
                    let b = g.leaf(Tensor::new(vec![2, 3], bv.to_vec()).unwrap(), false);
                    let y = build(&mut g, a, b);
                    let s = g.sum_all(y).unwrap();
                    g.value(s).data()[0]
                };
                let mut g = Graph::new();
                let a = g.leaf(a0.clone(), true);
                let b = g.leaf(b0.clone(), true);
                let y = build(&mut g, a, b);
                let loss = g.sum_all(y).unwrap();
                g.backward(loss).unwrap();

                let ga = g.grad(a).map(|s| s.to_vec()).unwrap_or(vec![0.0; 6]);
                let num_a = central_diff(|v| run(v, b0.data()), a0.data(), 1e-5);
                let rel = max_rel_err(&ga, &num_a);
                assert!(rel <= 1e-6, "{name} grad A rel err {rel} (seed {seed})");

                if let Some(gb) = g.grad(b) {
                    let num_b = central_diff(|v| run(a0.data(), v), b0.data(), 1e-5);
                    let rel = max_rel_err(gb, &num_b);
                    assert!(rel <= 1e-6, "{name} grad B rel err {rel} (seed {seed})");
                }
            }
        }
    }

    #[test]
    fn gradcheck_log_positive_domain() {
        for seed in 0..20u64 {
            let mut rng = StdRng::seed_from_u64(100 + seed);
            let x0: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..1.0)).collect();
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![2, 3], x0.clone()).unwrap(), true);
            let y = g.log(x).unwrap();
            let loss = g.sum_all(y).unwrap();
            g.backward(loss).unwrap();
            let num = central_diff(
                |v| {
                    let mut g = Graph::new();
                    let x = g.leaf(Tensor::new(vec![2, 3], v.to_vec()).unwrap(), false);
                    let y = g.log(x).unwrap();
                    let s = g.sum_all(y).unwrap();
                    g.value(s).data()[0]
                },
                &x0,
                1e-5,
            );
            let rel = max_rel_err(g.grad(x).unwrap(), &num);
            assert!(rel <= 1e-6, "log rel err {rel}");
        }
    }

    #[test]
    fn broadcast_grad_reduces_correctly() {
        // f(a, b) = sum(a * b) with a [2,3], b [3] -> db = column sums of a
        let a0 = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let b0 = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let mut g = Graph::new();
        let a = g.leaf(a0, false);
        let b = g.leaf(b0, true);
        let prod = g.mul(a, b).unwrap();
        let loss = g.sum_all(prod).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3.0, 1.0, 2.0, 4.0]), true);
        let m = g.mean_all(x).unwrap();
        g.backward(m).unwrap();
        for &gv in g.grad(x).unwrap() {
            assert!((gv - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn batched_matmul_broadcasts_rhs() {
        let mut g = Graph::new();
        let mut rng = StdRng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, &[4, 2, 3]);
        let b = rand_tensor(&mut rng, &[3, 5]);
        let an = g.leaf(a.clone(), true);
        let bn = g.leaf(b.clone(), true);
        let out = g.matmul(an, bn).unwrap();
        assert_eq!(g.shape(out), &[4, 2, 5]);
        // batch 2 of the output equals the plain 2-D product
        let mut g2 = Graph::new();
        let a2 = g2.leaf(
            Tensor::new(vec![2, 3], a.data()[2 * 6..3 * 6].to_vec()).unwrap(),
            false,
        );
        let b2 = g2.leaf(b.clone(), false);
        let o2 = g2.matmul(a2, b2).unwrap();
        assert_eq!(
            &g.value(out).data()[2 * 10..3 * 10],
            g2.value(o2).data()
        );
        // gradient flows through the broadcast
        let loss = g.sum_all(out).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(bn).is_some());
    }

    #[test]
    fn graph_replay_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let mut rng = StdRng::seed_from_u64(5);
            let x = g.leaf(rand_tensor(&mut rng, &[3, 3]), true);
            let w = g.leaf(rand_tensor(&mut rng, &[3, 3]), true);
            let h = g.matmul(x, w).unwrap();
            let t = g.tanh(h).unwrap();
            let loss = g.sum_all(t).unwrap();
            g.backward(loss).unwrap();
            (
                g.value(t).data().to_vec(),
                g.grad(w).unwrap().to_vec(),
            )
        };
        assert_eq!(build(), build());
    }
}
