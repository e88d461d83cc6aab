//! Reverse-mode automatic differentiation over whole-tensor operations.
//!
//! A `Tape` records one forward pass as a flat node list. Node ids are
//! creation-ordered, so the reverse sweep visits every consumer before its
//! producers. Gradients are materialized only where a node's subgraph
//! contains a differentiable leaf; frozen weights cost nothing in backward.

use std::rc::Rc;

use rand::Rng;

use crate::numerics::tensor::{
    bcast_strides, broadcast_shape, for_each_2, reduce_to_shape, Scalar, Tensor,
};
use crate::{Error, Result};

pub type NodeId = usize;

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Matmul(NodeId, NodeId),
    Conv1dSame {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Silu(NodeId),
    Relu(NodeId),
    GeluTanh(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    SoftmaxLast(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Rc<Vec<usize>>,
    },
    /// Mask entries are 0 or 1/(1-p); forward and backward multiply by them.
    Dropout {
        x: NodeId,
        mask: Rc<Vec<T>>,
    },
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    SliceAxis {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    SumAll(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

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

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.nodes[id].grad.take()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Elementwise sum with trailing-aligned broadcasting on either side.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape(), "add")?;
        let value = if va.shape() == vb.shape() {
            let mut v = va.clone();
            v.add_in_place(vb)?;
            v
        } else {
            let mut out = Tensor::zeros(&out_shape);
            let ea = bcast_strides(&out_shape, va.shape());
            let eb = bcast_strides(&out_shape, vb.shape());
            let (ad, bd) = (va.data(), vb.data());
            let od = out.data_mut();
            let mut lin = 0usize;
            for_each_2(&out_shape, &ea, &eb, |oa, ob| {
                od[lin] = ad[oa] + bd[ob];
                lin += 1;
            });
            out
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let value = self.nodes[x].value.map(|v| v * c);
        let rg = self.nodes[x].requires_grad;
        self.push(value, rg, Op::Scale(x, c))
    }

    /// Batched matrix product; leading (batch) axes broadcast.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul_forward(&self.nodes[a].value, &self.nodes[b].value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Matmul(a, b)))
    }

    /// Cross-correlation over the last axis with odd kernel, stride 1 and
    /// zero same-padding: x (B,C,L) * w (O,C,K) -> (B,O,L).
    pub fn conv1d_same(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let value = conv1d_same_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            b.map(|bi| &self.nodes[bi].value),
        )?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.any_grad(&ids);
        Ok(self.push(value, rg, Op::Conv1dSame { x, w, b }))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v * sigmoid(v));
        let rg = self.nodes[x].requires_grad;
        self.push(value, rg, Op::Silu(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v.max(T::zero()));
        let rg = self.nodes[x].requires_grad;
        self.push(value, rg, Op::Relu(x))
    }

    /// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu_tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(gelu_tanh_value);
        let rg = self.nodes[x].requires_grad;
        self.push(value, rg, Op::GeluTanh(x))
    }

    /// Normalizes the last axis to zero mean and unit variance (population
    /// variance), then applies a per-feature affine: gamma and beta of shape
    /// (D) for input (..., D).
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        let d = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", vx.shape(), &[]))?;
        let vg = &self.nodes[gamma].value;
        let vb = &self.nodes[beta].value;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::shape("layer_norm", vg.shape(), &[d]));
        }
        let rows = vx.numel() / d;
        let mut out = vec![T::zero(); vx.numel()];
        let (xd, gd, bd) = (vx.data(), vg.data(), vb.data());
        let eps_t = T::cast_from(eps);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let (mean, inv) = row_stats(row, eps_t);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Row-wise softmax over the last axis, max-subtracted.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        let d = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", vx.shape(), &[]))?;
        let rows = vx.numel() / d;
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            softmax_row(row, &mut out[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, rg, Op::SoftmaxLast(x)))
    }

    /// Mean cross-entropy of logits (B,K) against class indices, fused with
    /// softmax for a stable backward. Returns a rank-0 node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = &self.nodes[logits].value;
        if vl.rank() != 2 {
            return Err(Error::shape("cross_entropy", vl.shape(), &[0, 0]));
        }
        let (bsz, k) = (vl.shape()[0], vl.shape()[1]);
        if targets.len() != bsz {
            return Err(Error::shape("cross_entropy", &[targets.len()], &[bsz]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!(
                "class index {bad} out of range for {k} logits"
            )));
        }
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &vl.data()[r * k..(r + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut lse = T::zero();
            for &v in row {
                lse = lse + (v - max).exp();
            }
            total += (lse.ln() + max - row[t]).cast_f64();
        }
        let value = Tensor::scalar(T::cast_from(total / bsz as f64));
        let rg = self.nodes[logits].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: Rc::new(targets.to_vec()),
            },
        ))
    }

    /// Inverted dropout: in training mode, keeps each element with
    /// probability 1-p and scales kept elements by 1/(1-p). Eval mode and
    /// p = 0 are the identity (the input node is returned unchanged).
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let vx = &self.nodes[x].value;
        let keep = T::cast_from(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..vx.numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data: Vec<T> = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::Dropout {
                x,
                mask: Rc::new(mask),
            },
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x].value.reshaped(shape)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let value = self.nodes[x].value.permuted(perm)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(
            value,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        if axis >= vx.rank() || len == 0 || start + len > vx.shape()[axis] {
            return Err(Error::Index(format!(
                "slice [{start}, {}) on axis {axis} of {:?}",
                start + len,
                vx.shape()
            )));
        }
        let mut out_shape = vx.shape().to_vec();
        out_shape[axis] = len;
        let inner: usize = vx.shape()[axis + 1..].iter().product();
        let outer: usize = vx.shape()[..axis].iter().product();
        let full = vx.shape()[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, rg, Op::SliceAxis { x, axis, start }))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::config("concat of zero tensors"));
        }
        let first = self.nodes[xs[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Index(format!("concat axis {axis} of {first:?}")));
        }
        let mut total_axis = 0usize;
        for &id in xs {
            let s = self.nodes[id].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &id in xs {
                let v = &self.nodes[id].value;
                let len = v.shape()[axis];
                let base = o * len * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(xs);
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        if axis >= vx.rank() {
            return Err(Error::Index(format!("mean axis {axis} of {:?}", vx.shape())));
        }
        let n = vx.shape()[axis];
        let outer: usize = vx.shape()[..axis].iter().product();
        let inner: usize = vx.shape()[axis + 1..].iter().product();
        let mut out_shape = vx.shape().to_vec();
        out_shape.remove(axis);
        let mut data = vec![T::zero(); outer * inner];
        let inv = T::cast_from(1.0 / n as f64);
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + vx.data()[base + i];
                }
            }
        }
        for v in &mut data {
            *v = *v * inv;
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(value, rg, Op::MeanAxis { x, axis }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total = self.nodes[x]
            .value
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let rg = self.nodes[x].requires_grad;
        self.push(Tensor::scalar(total), rg, Op::SumAll(x))
    }

    /// Accumulates d(root)/d(node) into every node that requires a gradient.
    /// `root` must hold a single element.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::shape("backward", self.nodes[root].value.shape(), &[1]));
        }
        if !self.nodes[root].requires_grad {
            return Err(Error::Numeric(
                "backward from a node with no differentiable inputs".into(),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root].grad = Some(Tensor::full(
            self.nodes[root].value.shape(),
            T::one(),
        ));
        for id in (0..=root).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.nodes[id].grad.clone().expect("checked above");
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let ga = reduce_to_shape(&g, self.nodes[a].value.shape());
                    self.accumulate(a, ga)?;
                    let gb = reduce_to_shape(&g, self.nodes[b].value.shape());
                    self.accumulate(b, gb)?;
                }
                Op::Scale(x, c) => {
                    self.accumulate(x, g.map(|v| v * c))?;
                }
                Op::Matmul(a, b) => {
                    if self.nodes[a].requires_grad {
                        let bt = self.nodes[b].value.transpose_last2()?;
                        let da = matmul_forward(&g, &bt)?;
                        self.accumulate(a, reduce_to_shape(&da, self.nodes[a].value.shape()))?;
                    }
                    if self.nodes[b].requires_grad {
                        let at = self.nodes[a].value.transpose_last2()?;
                        let db = matmul_forward(&at, &g)?;
                        self.accumulate(b, reduce_to_shape(&db, self.nodes[b].value.shape()))?;
                    }
                }
                Op::Conv1dSame { x, w, b } => {
                    let wants_x = self.nodes[x].requires_grad;
                    let wants_w = self.nodes[w].requires_grad;
                    let (dx, dw) = conv1d_same_backward(
                        &self.nodes[x].value,
                        &self.nodes[w].value,
                        &g,
                        wants_x,
                        wants_w,
                    );
                    if let Some(dx) = dx {
                        self.accumulate(x, dx)?;
                    }
                    if let Some(dw) = dw {
                        self.accumulate(w, dw)?;
                    }
                    if let Some(bi) = b {
                        if self.nodes[bi].requires_grad {
                            let o = g.shape()[1];
                            let db = reduce_to_shape(&g, &[1, o, 1]).reshaped(&[o])?;
                            self.accumulate(bi, db)?;
                        }
                    }
                }
                Op::Silu(x) => {
                    let vx = &self.nodes[x].value;
                    let data: Vec<T> = vx
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gy)| {
                            let s = sigmoid(v);
                            gy * (s + v * s * (T::one() - s))
                        })
                        .collect();
                    let dg = Tensor::new(vx.shape().to_vec(), data)?;
                    self.accumulate(x, dg)?;
                }
                Op::Relu(x) => {
                    let vx = &self.nodes[x].value;
                    let data: Vec<T> = vx
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gy)| if v > T::zero() { gy } else { T::zero() })
                        .collect();
                    let dg = Tensor::new(vx.shape().to_vec(), data)?;
                    self.accumulate(x, dg)?;
                }
                Op::GeluTanh(x) => {
                    let vx = &self.nodes[x].value;
                    let data: Vec<T> = vx
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gy)| gy * gelu_tanh_derivative(v))
                        .collect();
                    let dg = Tensor::new(vx.shape().to_vec(), data)?;
                    self.accumulate(x, dg)?;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    self.layer_norm_backward(x, gamma, beta, eps, &g)?;
                }
                Op::SoftmaxLast(x) => {
                    let y = &self.nodes[id].value;
                    let d = *y.shape().last().expect("validated at creation");
                    let rows = y.numel() / d;
                    let mut dx = vec![T::zero(); y.numel()];
                    for r in 0..rows {
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for j in 0..d {
                            dx[r * d + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    let dg = Tensor::new(y.shape().to_vec(), dx)?;
                    self.accumulate(x, dg)?;
                }
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    let vl = &self.nodes[logits].value;
                    let (bsz, k) = (vl.shape()[0], vl.shape()[1]);
                    let up = g.item();
                    let scale = up * T::cast_from(1.0 / bsz as f64);
                    let mut dx = vec![T::zero(); vl.numel()];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &vl.data()[r * k..(r + 1) * k];
                        softmax_row(row, &mut dx[r * k..(r + 1) * k]);
                        dx[r * k + t] = dx[r * k + t] - T::one();
                        for v in &mut dx[r * k..(r + 1) * k] {
                            *v = *v * scale;
                        }
                    }
                    let dg = Tensor::new(vl.shape().to_vec(), dx)?;
                    self.accumulate(logits, dg)?;
                }
                Op::Dropout { x, mask } => {
                    let data: Vec<T> = g.data().iter().zip(mask.iter()).map(|(&gv, &m)| gv * m).collect();
                    let dg = Tensor::new(g.shape().to_vec(), data)?;
                    self.accumulate(x, dg)?;
                }
                Op::Reshape(x) => {
                    let dg = g.reshaped(self.nodes[x].value.shape())?;
                    self.accumulate(x, dg)?;
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0usize; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inv[p] = d;
                    }
                    let dg = g.permuted(&inv)?;
                    self.accumulate(x, dg)?;
                }
                Op::SliceAxis { x, axis, start } => {
                    let vx = &self.nodes[x].value;
                    let full = vx.shape()[axis];
                    let len = g.shape()[axis];
                    let inner: usize = vx.shape()[axis + 1..].iter().product();
                    let outer: usize = vx.shape()[..axis].iter().product();
                    let mut dx = Tensor::zeros(vx.shape());
                    let dd = dx.data_mut();
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        dd[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    self.accumulate(x, dx)?;
                }
                Op::Concat { xs, axis } => {
                    let inner: usize = g.shape()[axis + 1..].iter().product();
                    let outer: usize = g.shape()[..axis].iter().product();
                    let total = g.shape()[axis];
                    let mut offset = 0usize;
                    for &xid in &xs {
                        let xshape = self.nodes[xid].value.shape().to_vec();
                        let len = xshape[axis];
                        if self.nodes[xid].requires_grad {
                            let mut part = Tensor::zeros(&xshape);
                            let pd = part.data_mut();
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * len * inner;
                                pd[dst..dst + len * inner]
                                    .copy_from_slice(&g.data()[src..src + len * inner]);
                            }
                            self.accumulate(xid, part)?;
                        }
                        offset += len;
                    }
                }
                Op::MeanAxis { x, axis } => {
                    let vx = &self.nodes[x].value;
                    let n = vx.shape()[axis];
                    let inner: usize = vx.shape()[axis + 1..].iter().product();
                    let outer: usize = vx.shape()[..axis].iter().product();
                    let inv = T::cast_from(1.0 / n as f64);
                    let mut dx = Tensor::zeros(vx.shape());
                    let dd = dx.data_mut();
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for i in 0..inner {
                                dd[base + i] = g.data()[o * inner + i] * inv;
                            }
                        }
                    }
                    self.accumulate(x, dx)?;
                }
                Op::SumAll(x) => {
                    let up = g.item();
                    let dx = Tensor::full(self.nodes[x].value.shape(), up);
                    self.accumulate(x, dx)?;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: Tensor<T>) -> Result<()> {
        if !self.nodes[id].requires_grad {
            return Ok(());
        }
        match &mut self.nodes[id].grad {
            Some(g) => g.add_in_place(&contrib),
            slot @ None => {
                *slot = Some(contrib);
                Ok(())
            }
        }
    }

    fn layer_norm_backward(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        g: &Tensor<T>,
    ) -> Result<()> {
        let vx = &self.nodes[x].value;
        let vg = &self.nodes[gamma].value;
        let d = *vx.shape().last().expect("validated at creation");
        let rows = vx.numel() / d;
        let eps_t = T::cast_from(eps);
        let inv_d = T::cast_from(1.0 / d as f64);
        let mut dx = vec![T::zero(); vx.numel()];
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let gr = &g.data()[r * d..(r + 1) * d];
            let (mean, inv) = row_stats(row, eps_t);
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                let dxh = gr[j] * vg.data()[j];
                dgamma[j] = dgamma[j] + gr[j] * xh;
                dbeta[j] = dbeta[j] + gr[j];
                sum_dxh = sum_dxh + dxh;
                sum_dxh_xh = sum_dxh_xh + dxh * xh;
            }
            let m1 = sum_dxh * inv_d;
            let m2 = sum_dxh_xh * inv_d;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                let dxh = gr[j] * vg.data()[j];
                dx[r * d + j] = inv * (dxh - m1 - xh * m2);
            }
        }
        let shape = vx.shape().to_vec();
        self.accumulate(x, Tensor::new(shape, dx)?)?;
        self.accumulate(gamma, Tensor::new(vec![d], dgamma)?)?;
        self.accumulate(beta, Tensor::new(vec![d], dbeta)?)?;
        Ok(())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_tanh_value<T: Scalar>(x: T) -> T {
    let c = T::cast_from((2.0 / std::f64::consts::PI).sqrt());
    let a = T::cast_from(0.044715);
    let half = T::cast_from(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_tanh_derivative<T: Scalar>(x: T) -> T {
    let c = T::cast_from((2.0 / std::f64::consts::PI).sqrt());
    let a = T::cast_from(0.044715);
    let half = T::cast_from(0.5);
    let three = T::cast_from(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::cast_from(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row
        .iter()
        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
        / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

pub(crate) fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, ka) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if ka != kb {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let batch = broadcast_shape(&a.shape()[..ra - 2], &b.shape()[..rb - 2], "matmul")?;
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let mut out = vec![T::zero(); out_shape.iter().product()];
    let mut ea = bcast_strides(&batch, &a.shape()[..ra - 2]);
    let mut eb = bcast_strides(&batch, &b.shape()[..rb - 2]);
    for s in &mut ea {
        *s *= m * ka;
    }
    for s in &mut eb {
        *s *= ka * n;
    }
    let (ad, bd) = (a.data(), b.data());
    let mut batch_i = 0usize;
    for_each_2(&batch, &ea, &eb, |oa, ob| {
        let out_off = batch_i * m * n;
        batch_i += 1;
        for i in 0..m {
            let arow = &ad[oa + i * ka..oa + (i + 1) * ka];
            let orow = &mut out[out_off + i * n..out_off + (i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &bd[ob + p * n..ob + (p + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aip * brow[j];
                }
            }
        }
    });
    Tensor::new(out_shape, out)
}

fn conv1d_same_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || w.rank() != 3 {
        return Err(Error::shape("conv1d", x.shape(), w.shape()));
    }
    let (bsz, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, cw, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if c != cw || k % 2 == 0 {
        return Err(Error::shape("conv1d", x.shape(), w.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::shape("conv1d bias", b.shape(), &[o]));
        }
    }
    let pad = k / 2;
    let mut out = vec![T::zero(); bsz * o * l];
    let (xd, wd) = (x.data(), w.data());
    for bi in 0..bsz {
        for oi in 0..o {
            let orow = &mut out[(bi * o + oi) * l..(bi * o + oi + 1) * l];
            for ci in 0..c {
                let xrow = &xd[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                let wrow = &wd[(oi * c + ci) * k..(oi * c + ci + 1) * k];
                for (ki, &wv) in wrow.iter().enumerate() {
                    // y[t] += w[k] x[t + k - pad] over valid t
                    let t_lo = pad.saturating_sub(ki);
                    let t_hi = (l + pad).saturating_sub(ki).min(l);
                    for t in t_lo..t_hi {
                        orow[t] = orow[t] + wv * xrow[t + ki - pad];
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b.data()[oi];
                for v in orow.iter_mut() {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::new(vec![bsz, o, l], out)
}

fn conv1d_same_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    wants_x: bool,
    wants_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (bsz, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let pad = k / 2;
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let dx = wants_x.then(|| {
        let mut dx = vec![T::zero(); bsz * c * l];
        for bi in 0..bsz {
            for oi in 0..o {
                let grow = &gd[(bi * o + oi) * l..(bi * o + oi + 1) * l];
                for ci in 0..c {
                    let drow = &mut dx[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                    let wrow = &wd[(oi * c + ci) * k..(oi * c + ci + 1) * k];
                    for (ki, &wv) in wrow.iter().enumerate() {
                        let t_lo = pad.saturating_sub(ki);
                        let t_hi = (l + pad).saturating_sub(ki).min(l);
                        for t in t_lo..t_hi {
                            drow[t + ki - pad] = drow[t + ki - pad] + wv * grow[t];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![bsz, c, l], dx).expect("same layout as input")
    });
    let dw = wants_w.then(|| {
        let mut dw = vec![T::zero(); o * c * k];
        for bi in 0..bsz {
            for oi in 0..o {
                let grow = &gd[(bi * o + oi) * l..(bi * o + oi + 1) * l];
                for ci in 0..c {
                    let xrow = &xd[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                    for ki in 0..k {
                        let t_lo = pad.saturating_sub(ki);
                        let t_hi = (l + pad).saturating_sub(ki).min(l);
                        let mut acc = T::zero();
                        for t in t_lo..t_hi {
                            acc = acc + grow[t] * xrow[t + ki - pad];
                        }
                        let idx = (oi * c + ci) * k + ki;
                        dw[idx] = dw[idx] + acc;
                    }
                }
            }
        }
        Tensor::new(vec![o, c, k], dw).expect("same layout as weight")
    });
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{central_diff_grads, max_rel_err};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FD_TOL: f64 = 1e-6;
    const H: f64 = 1e-5;

    fn t2(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Projects any node to a scalar through a fixed random vector so that
    /// upstream gradients are non-degenerate.
    fn weighted_sum(tape: &mut Tape<f64>, id: NodeId, w: &Tensor<f64>) -> NodeId {
        let n = tape.value(id).numel();
        assert_eq!(w.numel(), n);
        let flat = tape.reshape(id, &[1, n]).unwrap();
        let wid = tape.constant(w.reshaped(&[n, 1]).unwrap());
        let prod = tape.matmul(flat, wid).unwrap();
        tape.sum_all(prod)
    }

    fn fd_check<F>(params: &[Tensor<f64>], build: F)
    where
        F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let root = build(&mut tape, &ids);
        tape.backward(root).unwrap();
        let analytic: Vec<Tensor<f64>> = ids
            .iter()
            .map(|&i| tape.grad(i).expect("param grad missing").clone())
            .collect();
        let numeric = central_diff_grads(
            params,
            |ps| {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = ps.iter().map(|p| t.param(p.clone())).collect();
                let r = build(&mut t, &ids);
                Ok(t.value(r).item())
            },
            H,
        )
        .unwrap();
        let report = max_rel_err(&analytic, &numeric);
        assert!(report.max_rel_err < FD_TOL, "{report:?}");
    }

    // ── Fixed expected values ──

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t2(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t2(&[2, 1], &[5., 6.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17., 39.]);
    }

    #[test]
    fn conv_known_same_padding() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[1, 1, 4], &[1., 2., 3., 4.]));
        let w = tape.constant(t2(&[1, 1, 3], &[1., 1., 1.]));
        let y = tape.conv1d_same(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 6., 9., 7.]);
    }

    #[test]
    fn conv_bias_shifts_every_position() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[1, 1, 4], &[1., 2., 3., 4.]));
        let w = tape.constant(t2(&[1, 1, 3], &[1., 1., 1.]));
        let b = tape.constant(t2(&[1], &[10.]));
        let y = tape.conv1d_same(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[13., 16., 19., 17.]);
    }

    #[test]
    fn silu_known_value() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[1], &[1.0]));
        let y = tape.silu(x);
        assert!((tape.value(y).data()[0] - 0.731_058_578_630_0049).abs() < 1e-12);
    }

    #[test]
    fn gelu_tanh_known_value() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[1], &[1.0]));
        let y = tape.gelu_tanh(x);
        assert!((tape.value(y).data()[0] - 0.841_192).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_known_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[1, 3], &[1., 2., 3.]));
        let g = tape.constant(t2(&[3], &[1., 1., 1.]));
        let b = tape.constant(t2(&[3], &[0., 0., 0.]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).data();
        let r = 1.224_744_871_391_589;
        assert!((v[0] + r).abs() < 1e-6 && v[1].abs() < 1e-6 && (v[2] - r).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_known_loss() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(t2(&[1, 2], &[0.0, 3f64.ln()]));
        let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
        assert!((tape.value(loss).item() - (4f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_vanishes_at_large_margin() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(t2(&[1, 3], &[0.0, 20.0, 0.0]));
        let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
        let v = tape.value(loss).item();
        assert!(v >= 0.0 && v < 1e-3, "loss {v}");
    }

    #[test]
    fn softmax_known_row_and_normalization() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[2, 2], &[0.0, 3f64.ln(), 5.0, 5.0]));
        let y = tape.softmax_last(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
        assert!((v[2] - 0.5).abs() < 1e-12 && (v[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn large_logits_stay_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[1, 3], &[1000.0, 999.0, -1000.0]));
        let s = tape.softmax_last(x).unwrap();
        tape.value(s).validate_finite("softmax").unwrap();
        let logits = tape.constant(t2(&[1, 2], &[800.0, -800.0]));
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        tape.value(loss).validate_finite("loss").unwrap();
    }

    // ── Finite-difference checks, randomized over 100 seeds per op ──

    #[test]
    fn fd_add_broadcast() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shapes: [(&[usize], &[usize]); 4] = [
                (&[2, 3], &[2, 3]),
                (&[2, 3], &[3]),
                (&[2, 1, 4], &[3, 1]),
                (&[3], &[]),
            ];
            let (sa, sb) = shapes[(seed % 4) as usize];
            let a = Tensor::randn(sa, 0.0, 1.0, &mut rng);
            let b = Tensor::randn(sb, 0.0, 1.0, &mut rng);
            let out = broadcast_shape(sa, sb, "t").unwrap();
            let w = Tensor::randn(&[out.iter().product()], 0.0, 1.0, &mut rng);
            fd_check(&[a, b], |t, ids| {
                let s = t.add(ids[0], ids[1]).unwrap();
                weighted_sum(t, s, &w)
            });
        }
    }

    #[test]
    fn fd_scale() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[3, 4], 0.0, 1.0, &mut rng);
            let c: f64 = rng.gen_range(-2.0..2.0);
            let w = Tensor::randn(&[12], 0.0, 1.0, &mut rng);
            fd_check(&[a], |t, ids| {
                let s = t.scale(ids[0], c);
                weighted_sum(t, s, &w)
            });
        }
    }

    #[test]
    fn fd_matmul_shapes() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cases: [(&[usize], &[usize]); 3] = [
                (&[2, 3], &[3, 4]),
                (&[2, 2, 3], &[3, 2]),
                (&[1, 2, 3], &[4, 3, 2]),
            ];
            let (sa, sb) = cases[(seed % 3) as usize];
            let a = Tensor::randn(sa, 0.0, 1.0, &mut rng);
            let b = Tensor::randn(sb, 0.0, 1.0, &mut rng);
            let n = matmul_forward(&a, &b).unwrap().numel();
            let w = Tensor::randn(&[n], 0.0, 1.0, &mut rng);
            fd_check(&[a, b], |t, ids| {
                let m = t.matmul(ids[0], ids[1]).unwrap();
                weighted_sum(t, m, &w)
            });
        }
    }

    #[test]
    fn fd_conv1d() {
        for seed in 0..60u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = if seed % 2 == 0 { 3 } else { 5 };
            let x = Tensor::randn(&[2, 3, 5], 0.0, 1.0, &mut rng);
            let w = Tensor::randn(&[2, 3, k], 0.0, 1.0, &mut rng);
            let b = Tensor::randn(&[2], 0.0, 1.0, &mut rng);
            let wsum = Tensor::randn(&[2 * 2 * 5], 0.0, 1.0, &mut rng);
            let with_bias = seed % 3 != 0;
            fd_check(&[x, w, b], |t, ids| {
                let bias = with_bias.then_some(ids[2]);
                let y = t.conv1d_same(ids[0], ids[1], bias).unwrap();
                // keep the unused bias parameter in the graph
                let y = if with_bias {
                    y
                } else {
                    let n = t.value(y).numel();
                    let flat = t.reshape(y, &[n]).unwrap();
                    let zero = t.scale(ids[2], 0.0);
                    let pad = t.concat(&[flat, zero], 0).unwrap();
                    t.slice_axis(pad, 0, 0, n).unwrap()
                };
                weighted_sum(t, y, &wsum)
            });
        }
    }

    #[test]
    fn fd_activations() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[2, 5], 0.0, 1.5, &mut rng);
            let w = Tensor::randn(&[10], 0.0, 1.0, &mut rng);
            fd_check(&[x.clone()], |t, ids| {
                let y = t.silu(ids[0]);
                weighted_sum(t, y, &w)
            });
            fd_check(&[x.clone()], |t, ids| {
                let y = t.gelu_tanh(ids[0]);
                weighted_sum(t, y, &w)
            });
            // keep relu inputs away from its kink
            let xr = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
            fd_check(&[xr], |t, ids| {
                let y = t.relu(ids[0]);
                weighted_sum(t, y, &w)
            });
        }
    }

    #[test]
    fn relu_derivative_is_zero_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t2(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn fd_layer_norm() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[3, 4], 0.0, 1.0, &mut rng);
            let g = Tensor::randn(&[4], 1.0, 0.3, &mut rng);
            let b = Tensor::randn(&[4], 0.0, 0.3, &mut rng);
            let w = Tensor::randn(&[12], 0.0, 1.0, &mut rng);
            fd_check(&[x, g, b], |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                weighted_sum(t, y, &w)
            });
        }
    }

    #[test]
    fn fd_softmax() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[3, 4], 0.0, 2.0, &mut rng);
            let w = Tensor::randn(&[12], 0.0, 1.0, &mut rng);
            fd_check(&[x], |t, ids| {
                let y = t.softmax_last(ids[0]).unwrap();
                weighted_sum(t, y, &w)
            });
        }
    }

    #[test]
    fn fd_cross_entropy() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::randn(&[4, 5], 0.0, 2.0, &mut rng);
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            fd_check(&[logits], |t, ids| {
                t.softmax_cross_entropy(ids[0], &targets).unwrap()
            });
        }
    }

    #[test]
    fn fd_reshape_permute_slice_concat() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[2, 3, 4], 0.0, 1.0, &mut rng);
            let b = Tensor::randn(&[2, 4, 3], 0.0, 1.0, &mut rng);
            let w = Tensor::randn(&[2 * 3 * 2], 0.0, 1.0, &mut rng);
            fd_check(&[a, b], |t, ids| {
                let bp = t.permute(ids[1], &[0, 2, 1]).unwrap();
                let cat = t.concat(&[ids[0], bp], 2).unwrap();
                let sl = t.slice_axis(cat, 2, 3, 2).unwrap();
                let rs = t.reshape(sl, &[6, 2]).unwrap();
                weighted_sum(t, rs, &w)
            });
        }
    }

    #[test]
    fn fd_mean_axis() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let axis = (seed % 3) as usize;
            let x = Tensor::randn(&[2, 3, 4], 0.0, 1.0, &mut rng);
            let n = 24 / [2, 3, 4][axis];
            let w = Tensor::randn(&[n], 0.0, 1.0, &mut rng);
            fd_check(&[x], |t, ids| {
                let y = t.mean_axis(ids[0], axis).unwrap();
                weighted_sum(t, y, &w)
            });
        }
    }

    // ── Dropout ──

    #[test]
    fn dropout_identity_cases_share_the_input_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[4, 4], 0.0, 1.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xid = tape.param(x.clone());
        let zero_p = tape.dropout(xid, 0.0, true, &mut rng).unwrap();
        let eval_mode = tape.dropout(xid, 0.5, false, &mut rng).unwrap();
        assert_eq!(zero_p, xid);
        assert_eq!(eval_mode, xid);
        assert_eq!(tape.value(eval_mode).data(), x.data());
        let s = tape.sum_all(zero_p);
        tape.backward(s).unwrap();
        assert!(tape.grad(xid).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn dropout_scales_survivors_and_masks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::full(&[100, 100], 1.0);
        let mut tape = Tape::new();
        let xid = tape.param(x);
        let y = tape.dropout(xid, 0.5, true, &mut rng).unwrap();
        let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count();
        assert!(
            tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0),
            "survivors must be scaled by 1/(1-p)"
        );
        let frac = kept as f64 / 10_000.0;
        assert!((0.45..=0.55).contains(&frac), "keep fraction {frac}");
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        let g = tape.grad(xid).unwrap();
        for (gv, yv) in g.data().iter().zip(tape.value(y).data()) {
            assert_eq!(*gv, *yv);
        }
    }

    // ── Algebraic properties ──

    #[test]
    fn matmul_with_identity_is_neutral_and_associative() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Tensor::randn(&[2, 2], 0.0, 1.0, &mut rng);
            let b = Tensor::randn(&[2, 3], 0.0, 1.0, &mut rng);
            let eye = t2(&[2, 2], &[1., 0., 0., 1.]);
            let mut tape = Tape::<f64>::new();
            let mid = tape.constant(m.clone());
            let bid = tape.constant(b.clone());
            let iid = tape.constant(eye);
            let im = tape.matmul(iid, mid).unwrap();
            assert_eq!(tape.value(im).data(), m.data());
            let left = tape.matmul(im, bid).unwrap();
            let ib = tape.matmul(iid, bid).unwrap();
            let right = tape.matmul(mid, ib).unwrap();
            for (l, r) in tape.value(left).data().iter().zip(tape.value(right).data()) {
                assert!((l - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_identity_kernel_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 1, 7], 0.0, 1.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xid = tape.constant(x.clone());
        let w = tape.constant(t2(&[1, 1, 3], &[0., 1., 0.]));
        let y = tape.conv1d_same(xid, w, None).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv_is_linear_in_input_and_kernel() {
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x1 = Tensor::randn(&[1, 2, 6], 0.0, 1.0, &mut rng);
            let x2 = Tensor::randn(&[1, 2, 6], 0.0, 1.0, &mut rng);
            let w1 = Tensor::randn(&[3, 2, 3], 0.0, 1.0, &mut rng);
            let w2 = Tensor::randn(&[3, 2, 3], 0.0, 1.0, &mut rng);
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let mut tape = Tape::<f64>::new();
            let (x1i, x2i) = (tape.constant(x1), tape.constant(x2));
            let (w1i, w2i) = (tape.constant(w1), tape.constant(w2));
            let sx1 = tape.scale(x1i, a);
            let sx2 = tape.scale(x2i, b);
            let xmix = tape.add(sx1, sx2).unwrap();
            let lhs_x = tape.conv1d_same(xmix, w1i, None).unwrap();
            let c1 = tape.conv1d_same(x1i, w1i, None).unwrap();
            let c2 = tape.conv1d_same(x2i, w1i, None).unwrap();
            let sc1 = tape.scale(c1, a);
            let sc2 = tape.scale(c2, b);
            let rhs_x = tape.add(sc1, sc2).unwrap();
            for (l, r) in tape.value(lhs_x).data().iter().zip(tape.value(rhs_x).data()) {
                assert!((l - r).abs() < 1e-10);
            }
            let sw1 = tape.scale(w1i, a);
            let sw2 = tape.scale(w2i, b);
            let wmix = tape.add(sw1, sw2).unwrap();
            let lhs_w = tape.conv1d_same(x1i, wmix, None).unwrap();
            let k1 = tape.conv1d_same(x1i, w1i, None).unwrap();
            let k2 = tape.conv1d_same(x1i, w2i, None).unwrap();
            let sk1 = tape.scale(k1, a);
            let sk2 = tape.scale(k2, b);
            let rhs_w = tape.add(sk1, sk2).unwrap();
            for (l, r) in tape.value(lhs_w).data().iter().zip(tape.value(rhs_w).data()) {
                assert!((l - r).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layer_norm_constant_rows_and_beta_shift() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[1, 4], &[7., 7., 7., 7.]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b0 = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b0, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-6));
        let b5 = tape.constant(Tensor::full(&[4], 5.0));
        let y5 = tape.layer_norm(x, g, b5, 1e-5).unwrap();
        for (a, b) in tape.value(y5).data().iter().zip(tape.value(y).data()) {
            assert_eq!(*a, b + 5.0);
        }
    }

    #[test]
    fn layer_norm_rows_have_unit_stats() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[5, 8], 1.0, 3.0, &mut rng);
            let mut tape = Tape::<f64>::new();
            let xid = tape.constant(x);
            let g = tape.constant(Tensor::full(&[8], 1.0));
            let b = tape.constant(Tensor::zeros(&[8]));
            let y = tape.layer_norm(xid, g, b, 1e-5).unwrap();
            for r in 0..5 {
                let row = &tape.value(y).data()[r * 8..(r + 1) * 8];
                let mean: f64 = row.iter().sum::<f64>() / 8.0;
                let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
                assert!(mean.abs() <= 1e-6, "row mean {mean}");
                assert!((var - 1.0).abs() <= 1e-4, "row variance {var}");
            }
        }
    }

    #[test]
    fn uniform_logits_lose_ln_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[3, 5]));
        let loss = tape.softmax_cross_entropy(logits, &[0, 2, 4]).unwrap();
        assert!((tape.value(loss).item() - 5f64.ln()).abs() < 1e-12);
    }

    // ── Graph bookkeeping ──

    #[test]
    fn frozen_leaves_get_no_gradient_but_pass_it_through() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t2(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t2(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t2(&[2], &[1.0, 2.0]));
        let s1 = tape.sum_all(x);
        let s2 = tape.sum_all(x);
        let both = tape.add(s1, s2).unwrap();
        tape.backward(both).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_roots() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t2(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_rejects_fully_frozen_graphs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t2(&[2], &[1.0, 2.0]));
        let s = tape.sum_all(x);
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn creation_rejects_bad_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.concat(&[a, b], 0).is_err());
        assert!(tape.slice_axis(a, 1, 2, 2).is_err());
        let even = tape.constant(Tensor::zeros(&[1, 3, 2]));
        let x3 = tape.constant(Tensor::zeros(&[1, 3, 8]));
        assert!(tape.conv1d_same(x3, even, None).is_err());
        let t = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.softmax_cross_entropy(t, &[0, 3]).is_err());
    }
}
