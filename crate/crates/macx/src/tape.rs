//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is a Wengert tape rebuilt on every forward pass: each op
//! appends a node holding its output value and enough metadata to run the
//! chain rule. Node indices grow monotonically, so the tape is topologically
//! ordered by construction and one reverse sweep visits every op exactly
//! once. Gradients of intermediate nodes are dropped as soon as their
//! parents have consumed them; leaf gradients are kept and can be exported
//! into a [`ParamRegistry`].

use crate::error::{Error, Result};
use crate::params::ParamRegistry;
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<T> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Broadcast add of a vector to every row of a matrix.
    AddRows { m: NodeId, v: NodeId },
    /// Broadcast elementwise product of a vector with every row.
    MulRows { m: NodeId, v: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Narrow { x: NodeId, axis: usize, start: usize },
    Reshape { x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Elu { x: NodeId },
    MaskedSoftmax { x: NodeId },
    Sum { x: NodeId },
    Scale { x: NodeId, c: T },
    AddScalar { x: NodeId },
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    /// registry index -> leaf node, so each parameter appears once per tape.
    param_nodes: HashMap<usize, NodeId>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), param_nodes: HashMap::new(), backward_done: false }
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

    /// Gradient of a leaf after `backward`; `None` if it never received one.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, needs_grad, op });
        self.grads.push(None);
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Constant leaf; gradients never flow into it.
    pub fn input(&mut self, mut t: Tensor<T>) -> NodeId {
        t.requires_grad = false;
        self.push(t, false, Op::Leaf)
    }

    /// Leaf whose `requires_grad` flag decides whether it accumulates.
    pub fn var(&mut self, t: Tensor<T>) -> NodeId {
        let ng = t.requires_grad;
        self.push(t, ng, Op::Leaf)
    }

    /// Leaf bound to a registry parameter. Repeated calls for the same
    /// parameter return the same node.
    pub fn param(&mut self, reg: &ParamRegistry<T>, idx: usize) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&idx) {
            return id;
        }
        let mut t = reg.value(idx).clone();
        t.requires_grad = true;
        t.grad = None;
        let id = self.push(t, true, Op::Leaf);
        self.param_nodes.insert(idx, id);
        id
    }

    // ── ops ─────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), ng, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_raw(shape, data), ng, op))
    }

    /// `m + v` with `v` broadcast over the rows of `m`.
    pub fn add_rows(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.broadcast_check("add_rows", m, v)?;
        let mut out = self.value(m).data().to_vec();
        let vv = self.value(v).data();
        for row in out.chunks_exact_mut(c) {
            for (o, &x) in row.iter_mut().zip(vv) {
                *o = *o + x;
            }
        }
        let ng = self.needs(m) || self.needs(v);
        Ok(self.push(Tensor::from_raw(vec![r, c], out), ng, Op::AddRows { m, v }))
    }

    /// `m ⊙ v` with `v` broadcast over the rows of `m`.
    pub fn mul_rows(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, c) = self.broadcast_check("mul_rows", m, v)?;
        let mut out = self.value(m).data().to_vec();
        let vv = self.value(v).data();
        for row in out.chunks_exact_mut(c) {
            for (o, &x) in row.iter_mut().zip(vv) {
                *o = *o * x;
            }
        }
        let ng = self.needs(m) || self.needs(v);
        Ok(self.push(Tensor::from_raw(vec![r, c], out), ng, Op::MulRows { m, v }))
    }

    fn broadcast_check(&self, op: &'static str, m: NodeId, v: NodeId) -> Result<(usize, usize)> {
        let (r, c) = self.value(m).dims2()?;
        if self.value(v).numel() != c {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(m).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        Ok((r, c))
    }

    /// Concatenation along `axis`. All other extents must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "no tensors to concatenate".into(),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut out_shape = first.clone();
        for &p in &parts[1..] {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter().enumerate().all(|(i, &e)| i == axis || e == first[i]);
            if !compatible {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            out_shape[axis] += s[axis];
        }
        // Row-major copy: per outer block, append each part's lane.
        let outer: usize = out_shape[..axis].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        let inner: usize = out_shape[axis + 1..].iter().product();
        for block in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let lane = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[block * lane..(block + 1) * lane]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_raw(out_shape, data), ng, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Contiguous slice of length `len` along `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "narrow",
                shape,
                reason: format!("axis {axis}, start {start}, len {len}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_lane = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for block in 0..outer {
            let base = block * src_lane + start * inner;
            data.extend_from_slice(&self.value(x).data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_raw(out_shape, data), ng, Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("incompatible with {} elements", self.value(x).numel()),
            });
        }
        let data = self.value(x).data().to_vec();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_raw(shape, data), ng, Op::Reshape { x }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, |v| v.tanh(), Op::Tanh { x })
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: NodeId) -> NodeId {
        self.map_op(x, |v| if v > T::zero() { v } else { v.exp() - T::one() }, Op::Elu { x })
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        self.map_op(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        self.map_op(x, |v| v + c, Op::AddScalar { x })
    }

    fn map_op(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let ng = self.needs(x);
        self.push(Tensor::from_raw(shape, data), ng, op)
    }

    /// Softmax over a 1-D tensor with a validity mask. Masked positions are
    /// exactly zero in the output; unmasked positions are exp-normalized
    /// after max-subtraction. Masking is an additive -1e9 surrogate applied
    /// before stabilization, with exact zeroing after normalization.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let t = self.value(x);
        if t.ndim() != 1 {
            return Err(Error::InvalidShape {
                op: "masked_softmax",
                shape: t.shape().to_vec(),
                reason: "expected a 1-D tensor of logits".into(),
            });
        }
        if t.numel() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyAttentionSupport);
        }
        let neg = T::from_f64(-1e9);
        let shifted: Vec<T> = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { v + neg })
            .collect();
        let max = shifted.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut out: Vec<T> = shifted.iter().map(|&v| (v - max).exp()).collect();
        let total: T = out.iter().cloned().sum();
        for (o, &m) in out.iter_mut().zip(mask) {
            *o = if m { *o / total } else { T::zero() };
        }
        let n = out.len();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_raw(vec![n], out), ng, Op::MaskedSoftmax { x }))
    }

    /// Sum of all elements, as a shape-[1] scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).data().iter().cloned().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), ng, Op::Sum { x })
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each recorded op is visited at most
    /// once, in reverse topological order. Fails on a non-scalar loss and on
    /// a second call without rebuilding the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(nodes[i].op, Op::Leaf) {
                // keep leaf gradients for export / inspection
                grads[i] = Some(g);
                continue;
            }
            propagate(nodes, grads, i, &g);
        }
        Ok(())
    }

    /// Adds every parameter leaf's gradient into its registry accumulator.
    pub fn export_param_grads(&self, reg: &mut ParamRegistry<T>) {
        for (&idx, &node) in &self.param_nodes {
            if let Some(g) = self.grads[node.0].as_deref() {
                reg.value_mut(idx).accumulate_grad(g);
            }
        }
    }

    /// Structural check used in tests: parents precede children.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| {
            let mut ok = true;
            let mut before = |id: &NodeId| ok &= id.0 < i;
            match &n.op {
                Op::Leaf => {}
                Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                    before(a);
                    before(b);
                }
                Op::AddRows { m, v } | Op::MulRows { m, v } => {
                    before(m);
                    before(v);
                }
                Op::Concat { parts, .. } => parts.iter().for_each(|p| before(p)),
                Op::Narrow { x, .. }
                | Op::Reshape { x }
                | Op::Sigmoid { x }
                | Op::Tanh { x }
                | Op::Elu { x }
                | Op::MaskedSoftmax { x }
                | Op::Sum { x }
                | Op::Scale { x, .. }
                | Op::AddScalar { x } => before(x),
            }
            ok
        })
    }
}

// ── backward rules ──────────────────────────────────────────────────────

/// Gradient slot of `id`, zero-initialized on first touch; `None` when the
/// node does not participate in differentiation.
fn slot<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: NodeId,
) -> Option<&'g mut [T]> {
    if !nodes[id.0].needs_grad {
        return None;
    }
    let n = nodes[id.0].value.numel();
    Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
}

fn propagate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let val = |id: NodeId| &nodes[id.0].value;
    match &nodes[i].op {
        Op::Leaf => unreachable!("leaves are handled in the sweep"),
        Op::Matmul { a, b } => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).shape()[1];
            if let Some(da) = slot(grads, nodes, *a) {
                matmul_nt_acc(g, val(*b).data(), da, m, n, k);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                matmul_tn_acc(val(*a).data(), g, db, m, k, n);
            }
        }
        Op::Add { a, b } => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(da, g, T::one());
            }
            if let Some(db) = slot(grads, nodes, *b) {
                axpy(db, g, T::one());
            }
        }
        Op::Sub { a, b } => {
            if let Some(da) = slot(grads, nodes, *a) {
                axpy(da, g, T::one());
            }
            if let Some(db) = slot(grads, nodes, *b) {
                axpy(db, g, -T::one());
            }
        }
        Op::Mul { a, b } => {
            if let Some(da) = slot(grads, nodes, *a) {
                for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(val(*b).data()) {
                    *d = *d + gi * bi;
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(val(*a).data()) {
                    *d = *d + gi * ai;
                }
            }
        }
        Op::AddRows { m, v } => {
            let c = val(*v).numel();
            if let Some(dm) = slot(grads, nodes, *m) {
                axpy(dm, g, T::one());
            }
            if let Some(dv) = slot(grads, nodes, *v) {
                for row in g.chunks_exact(c) {
                    for (d, &gi) in dv.iter_mut().zip(row) {
                        *d = *d + gi;
                    }
                }
            }
        }
        Op::MulRows { m, v } => {
            let c = val(*v).numel();
            if let Some(dm) = slot(grads, nodes, *m) {
                let vd = val(*v).data();
                for (drow, grow) in dm.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                    for ((d, &gi), &vi) in drow.iter_mut().zip(grow).zip(vd) {
                        *d = *d + gi * vi;
                    }
                }
            }
            if let Some(dv) = slot(grads, nodes, *v) {
                let md = val(*m).data();
                for (grow, mrow) in g.chunks_exact(c).zip(md.chunks_exact(c)) {
                    for ((d, &gi), &mi) in dv.iter_mut().zip(grow).zip(mrow) {
                        *d = *d + gi * mi;
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = nodes[i].value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total_lane = out_shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let lane = val(p).shape()[*axis] * inner;
                if let Some(dp) = slot(grads, nodes, p) {
                    for block in 0..outer {
                        let src = block * total_lane + offset;
                        let dst = block * lane;
                        for j in 0..lane {
                            dp[dst + j] = dp[dst + j] + g[src + j];
                        }
                    }
                }
                offset += lane;
            }
        }
        Op::Narrow { x, axis, start } => {
            let src_shape = val(*x).shape();
            let out_shape = nodes[i].value.shape();
            let outer: usize = src_shape[..*axis].iter().product();
            let inner: usize = src_shape[*axis + 1..].iter().product();
            let src_lane = src_shape[*axis] * inner;
            let len_lane = out_shape[*axis] * inner;
            if let Some(dx) = slot(grads, nodes, *x) {
                for block in 0..outer {
                    let dst = block * src_lane + start * inner;
                    let src = block * len_lane;
                    for j in 0..len_lane {
                        dx[dst + j] = dx[dst + j] + g[src + j];
                    }
                }
            }
        }
        Op::Reshape { x } | Op::AddScalar { x } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(dx, g, T::one());
            }
        }
        Op::Sigmoid { x } => {
            let y = nodes[i].value.data();
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    *d = *d + gi * yi * (T::one() - yi);
                }
            }
        }
        Op::Tanh { x } => {
            let y = nodes[i].value.data();
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    *d = *d + gi * (T::one() - yi * yi);
                }
            }
        }
        Op::Elu { x } => {
            // y > 0 iff x > 0; below zero dy/dx = e^x = y + 1.
            let y = nodes[i].value.data();
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    let slope = if yi > T::zero() { T::one() } else { yi + T::one() };
                    *d = *d + gi * slope;
                }
            }
        }
        Op::MaskedSoftmax { x } => {
            // dL/dx_i = p_i (g_i - sum_j g_j p_j); masked lanes have p_i = 0.
            let p = nodes[i].value.data();
            let dot: T = g.iter().zip(p).map(|(&gi, &pi)| gi * pi).sum();
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &gi), &pi) in dx.iter_mut().zip(g).zip(p) {
                    *d = *d + pi * (gi - dot);
                }
            }
        }
        Op::Sum { x } => {
            let gi = g[0];
            if let Some(dx) = slot(grads, nodes, *x) {
                for d in dx.iter_mut() {
                    *d = *d + gi;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(dx) = slot(grads, nodes, *x) {
                axpy(dx, g, *c);
            }
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s * c;
    }
}

/// c = a @ b for row-major a[m,k], b[k,n]. i-k-j loop order keeps the inner
/// loop contiguous in both b and c.
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c += a @ b^T for a[m,n], b[k,n]: each output element is a dot product of
/// two contiguous rows.
fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (cv, brow) in crow.iter_mut().zip(b.chunks_exact(n)) {
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *cv = *cv + acc;
        }
    }
}

/// c += a^T @ b for a[m,k], b[m,n]: rank-1 update per paired row of a and b.
fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn mat(r: usize, c: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(r, c, data.to_vec()).unwrap()
    }

    fn grad_var(t: Tensor<f64>) -> Tensor<f64> {
        t.with_grad()
    }

    // Independent triple-loop oracle for matmul.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.at2(i, kk) * b.at2(kk, j);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.input(mat(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = g.input(mat(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(c).data(), g.value(b).data());
    }

    #[test]
    fn matmul_one_by_one() {
        let mut g = Graph::new();
        let a = g.input(mat(1, 1, &[2.0]));
        let b = g.input(mat(1, 1, &[3.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_scalar_loop_oracle() {
        let mut rng = Rng::new(11);
        let a = Tensor::from_fn(vec![3, 4], |_| rng.range(-2.0, 2.0));
        let b = Tensor::from_fn(vec![4, 2], |_| rng.range(-2.0, 2.0));
        let expect = matmul_oracle(&a, &b);
        let mut g = Graph::new();
        let (ai, bi) = (g.input(a), g.input(b));
        let c = g.matmul(ai, bi).unwrap();
        for (got, want) in g.value(c).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![3, 4]));
        let b = g.input(Tensor::zeros(vec![5, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![5.0, 5.0, 5.0]).unwrap());
        let p = g.masked_softmax(x, &[true, true, true]).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 1.0_f64 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_log_two_fixture() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0, 2.0_f64.ln()]).unwrap());
        let p = g.masked_softmax(x, &[true, true]).unwrap();
        assert!((g.value(p).data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g.value(p).data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_masked_position_exactly_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![9.0, 1.0, 4.0]).unwrap());
        let p = g.masked_softmax(x, &[true, false, true]).unwrap();
        let d = g.value(p).data();
        assert_eq!(d[1], 0.0);
        // two-element closed form over the surviving logits
        let e0 = (9.0_f64 - 9.0).exp();
        let e2 = (4.0_f64 - 9.0).exp();
        assert!((d[0] - e0 / (e0 + e2)).abs() < 1e-12);
        assert!((d[2] - e2 / (e0 + e2)).abs() < 1e-12);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let err = g.masked_softmax(x, &[false, false]).unwrap_err();
        assert_eq!(err.to_string(), "empty attention support");
    }

    #[test]
    fn softmax_shift_invariant_on_unmasked() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let n = 1 + rng.below(8);
            let logits: Vec<f64> = (0..n).map(|_| rng.range(-4.0, 4.0)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.7)).collect();
            if !mask.iter().any(|&m| m) {
                mask[0] = true;
            }
            let shift = rng.range(-10.0, 10.0);
            let shifted: Vec<f64> =
                logits.iter().zip(&mask).map(|(&l, &m)| if m { l + shift } else { l }).collect();

            let mut g = Graph::new();
            let a = g.input(Tensor::vector(logits).unwrap());
            let b = g.input(Tensor::vector(shifted).unwrap());
            let pa = g.masked_softmax(a, &mask).unwrap();
            let pb = g.masked_softmax(b, &mask).unwrap();
            for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
                assert!((x - y).abs() < 1e-6);
            }
            let total: f64 = g.value(pa).data().iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(g.value(pa).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.var(grad_var(mat(2, 3, &[1., 2., 3., 4., 5., 6.])));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.var(grad_var(Tensor::vector(vec![1.0, -2.0]).unwrap()));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.var(grad_var(Tensor::vector(vec![1.0, 2.0]).unwrap()));
        let y = g.add(x, x).unwrap();
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn second_backward_without_reforward_is_error() {
        let mut g = Graph::new();
        let x = g.var(grad_var(Tensor::vector(vec![1.0]).unwrap()));
        let s = g.sum(x);
        g.backward(s).unwrap();
        let err = g.backward(s).unwrap_err();
        assert!(matches!(err, Error::BackwardTwice));
    }

    #[test]
    fn diamond_reuse_accumulates_both_paths() {
        // y = sum(x*x + x) -> dy/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.var(grad_var(Tensor::vector(vec![3.0, -1.0]).unwrap()));
        let sq = g.mul(x, x).unwrap();
        let tot = g.add(sq, x).unwrap();
        let s = g.sum(tot);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[7.0, -1.0]);
    }

    #[test]
    fn concat_singleton_is_identity() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let c = g.concat(&[x], 0).unwrap();
        assert_eq!(g.value(c).data(), g.value(x).data());
        assert_eq!(g.value(c).shape(), g.value(x).shape());
    }

    #[test]
    fn concat_vectors_preserves_order() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = g.input(Tensor::vector(vec![3.0, 4.0, 5.0]).unwrap());
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).shape(), &[5]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn concat_backward_splits_grads() {
        let mut g = Graph::new();
        let a = g.var(grad_var(Tensor::vector(vec![1.0, 2.0]).unwrap()));
        let b = g.var(grad_var(Tensor::vector(vec![3.0]).unwrap()));
        let c = g.concat(&[a, b], 0).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0]);
    }

    #[test]
    fn concat_off_axis_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2, 4]));
        let err = g.concat(&[a, b], 0).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn concat_axis1_matches_row_layout() {
        let mut g = Graph::new();
        let a = g.input(mat(2, 2, &[1., 2., 3., 4.]));
        let b = g.input(mat(2, 1, &[9., 8.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3]);
        assert_eq!(g.value(c).data(), &[1., 2., 9., 3., 4., 8.]);
    }

    #[test]
    fn narrow_roundtrips_with_concat() {
        let mut g = Graph::new();
        let x = g.input(mat(2, 4, &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let left = g.narrow(x, 1, 0, 2).unwrap();
        let right = g.narrow(x, 1, 2, 2).unwrap();
        let back = g.concat(&[left, right], 1).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut g = Graph::new();
        let x = g.var(grad_var(Tensor::vector(vec![0.3, -0.7, 1.1]).unwrap()));
        let y = g.tanh(x);
        let z = g.mul(x, y).unwrap();
        let w = g.concat(&[y, z], 0).unwrap();
        let _ = g.sum(w);
        assert!(g.is_topologically_ordered());
    }

    /// Central-difference oracle over a composite graph touching every op.
    /// h = 1e-5, float64, relative error denominator max(|a|,|b|,1e-8).
    #[test]
    fn finite_differences_agree_on_composite_graph() {
        let mut rng = Rng::new(99);
        let w1 = Tensor::from_fn(vec![4, 6], |_| rng.range(-0.8, 0.8));
        let w2 = Tensor::from_fn(vec![3, 4], |_| rng.range(-0.8, 0.8));
        let v = Tensor::from_fn(vec![6], |_| rng.range(-0.8, 0.8));
        let x = Tensor::from_fn(vec![3, 4], |_| rng.range(-1.0, 1.0));
        let mask = [true, true, false, true, true, true];

        let eval = |w1: &Tensor<f64>, w2: &Tensor<f64>, v: &Tensor<f64>| -> (Graph<f64>, NodeId, [NodeId; 3]) {
            let mut g = Graph::new();
            let w1n = g.var(grad_var(w1.clone()));
            let w2n = g.var(grad_var(w2.clone()));
            let vn = g.var(grad_var(v.clone()));
            let xn = g.input(x.clone());

            let h = g.matmul(xn, w1n).unwrap(); // [3,6]
            let h = g.add_rows(h, vn).unwrap();
            let h = g.elu(h);
            let hm = g.mul_rows(h, vn).unwrap();
            let row = g.narrow(hm, 0, 1, 1).unwrap(); // [1,6]
            let flat = g.reshape(row, vec![6]).unwrap();
            let att = g.masked_softmax(flat, &mask).unwrap();
            let att2 = g.reshape(att, vec![1, 6]).unwrap();
            let left = g.sigmoid(att2);
            let right = g.tanh(att2);
            let both = g.concat(&[left, right], 0).unwrap(); // [2,6]
            let picked = g.narrow(both, 1, 1, 4).unwrap(); // [2,4]
            let prod = g.matmul(w2n, w1n).unwrap(); // [3,6]
            let prod = g.narrow(prod, 0, 0, 2).unwrap(); // [2,6]
            let prod = g.narrow(prod, 1, 0, 4).unwrap(); // [2,4]
            let mixed = g.mul(picked, prod).unwrap();
            let shifted = g.add_scalar(mixed, 0.25);
            let scaled = g.scale(shifted, 1.5);
            let diff = g.sub(scaled, prod).unwrap();
            let s = g.sum(diff);
            let sq = g.mul(s, s).unwrap();
            (g, sq, [w1n, w2n, vn])
        };

        let (mut g, loss, leaves) = eval(&w1, &w2, &v);
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> =
            leaves.iter().map(|&l| g.grad(l).unwrap().to_vec()).collect();

        let params = [w1.clone(), w2.clone(), v.clone()];
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for (pi, p) in params.iter().enumerate() {
            for ei in 0..p.numel() {
                let mut plus = params.clone();
                plus[pi].data_mut()[ei] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[ei] -= h;
                let (gp, lp, _) = eval(&plus[0], &plus[1], &plus[2]);
                let (gm, lm, _) = eval(&minus[0], &minus[1], &minus[2]);
                let fd = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
                let a = analytic[pi][ei];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn identical_inputs_produce_bit_identical_outputs() {
        let build = || {
            let mut rng = Rng::new(1234);
            let a = Tensor::from_fn(vec![5, 5], |_| rng.range(-1.0, 1.0));
            let b = Tensor::from_fn(vec![5, 5], |_| rng.range(-1.0, 1.0));
            let mut g = Graph::new();
            let (an, bn) = (g.input(a), g.input(b));
            let c = g.matmul(an, bn).unwrap();
            let t = g.tanh(c);
            let s = g.sum(t);
            g.value(s).data()[0].to_bits()
        };
        assert_eq!(build(), build());
    }
}
