//! Operation recording and reverse-mode gradient computation.
//!
//! Each differentiable op is a method on [`Tape`]. The tape records one node
//! per call, storing the input node ids and whatever forward values the
//! backward rule needs. [`Tape::backward`] walks the record once in reverse,
//! accumulating gradients additively into every node, so a leaf consumed by
//! several ops receives the sum of its contributions.
//!
//! Construction is single-threaded per tape; kernel internals may parallelize
//! but are deterministic.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{
    binary_broadcast, broadcast_shapes, broadcast_strides, last_dim, logsumexp_row, matmul_raw,
    reduce_to_shape, softmax_row, transpose2d_raw,
};
use super::{NodeId, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Floor applied inside `log` when clamping is enabled.
pub const LOG_FLOOR: f64 = 1e-12;

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

enum Op<S> {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
        a_val: Tensor<S>,
        b_val: Tensor<S>,
    },
    Add {
        a: NodeId,
        b: NodeId,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Sub {
        a: NodeId,
        b: NodeId,
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Mul {
        a: NodeId,
        b: NodeId,
        a_val: Tensor<S>,
        b_val: Tensor<S>,
    },
    Relu {
        x: NodeId,
        x_val: Tensor<S>,
    },
    Sigmoid {
        x: NodeId,
        out: Tensor<S>,
    },
    Exp {
        x: NodeId,
        out: Tensor<S>,
    },
    Log {
        x: NodeId,
        x_val: Tensor<S>,
        clamped: bool,
    },
    Neg {
        x: NodeId,
    },
    Square {
        x: NodeId,
        x_val: Tensor<S>,
    },
    Scale {
        x: NodeId,
        c: S,
    },
    AddScalar {
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        x_val: Tensor<S>,
        lo: S,
        hi: S,
    },
    SumAll {
        x: NodeId,
        n: usize,
    },
    MeanAll {
        x: NodeId,
        n: usize,
    },
    SumLast {
        x: NodeId,
        last: usize,
    },
    BroadcastTo {
        x: NodeId,
        x_shape: Vec<usize>,
    },
    Reshape {
        x: NodeId,
        x_shape: Vec<usize>,
    },
    Transpose2d {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    ConcatLast {
        parts: Vec<(NodeId, usize)>,
    },
    SliceLast {
        x: NodeId,
        x_shape: Vec<usize>,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: NodeId,
        rows: usize,
        row_len: usize,
        indices: Vec<usize>,
    },
    SoftmaxLast {
        x: NodeId,
        out: Tensor<S>,
    },
    LogsumexpLast {
        x: NodeId,
        x_val: Tensor<S>,
        out: Tensor<S>,
    },
    MaxLast {
        x: NodeId,
        last: usize,
        argmax: Vec<usize>,
    },
}

struct Node<S> {
    shape: Vec<usize>,
    op: Op<S>,
}

/// Recorded forward pass; replayed in reverse by [`Tape::backward`].
pub struct Tape<S> {
    id: u64,
    nodes: Vec<Node<S>>,
    log_clamping: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            log_clamping: true,
        }
    }

    /// Disable the `log` input floor; non-positive inputs then error.
    pub fn without_log_clamping(mut self) -> Self {
        self.log_clamping = false;
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Tensor<S> {
        let id = self.push(t.shape().to_vec(), Op::Leaf);
        t.attach(id, self.id)
    }

    fn push(&mut self, shape: Vec<usize>, op: Op<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { shape, op });
        id
    }

    /// Node id of `t`, registering a fresh leaf for detached tensors.
    fn input(&mut self, t: &Tensor<S>, op: &'static str) -> Result<(NodeId, Tensor<S>)> {
        match t.node() {
            Some(id) => {
                if t.tape_id() != self.id {
                    Err(TensorError::ForeignTape { op })
                } else {
                    Ok((id, t.clone()))
                }
            }
            None => Ok((self.leaf(t).node().unwrap(), t.clone())),
        }
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Tensor<S> {
        let id = self.push(shape.clone(), op);
        Tensor::with_node(shape, data, id, self.id)
    }

    // ───────────────────────── forward ops ─────────────────────────

    pub fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        let (aid, a_val) = self.input(a, "matmul")?;
        let (bid, b_val) = self.input(b, "matmul")?;
        Ok(self.out(
            vec![m, n],
            data,
            Op::Matmul {
                a: aid,
                b: bid,
                a_val,
                b_val,
            },
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: &Tensor<S>,
        b: &Tensor<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<(Vec<usize>, Vec<S>, NodeId, NodeId)> {
        let out_shape =
            broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })?;
        let data = binary_broadcast(a.data(), a.shape(), b.data(), b.shape(), &out_shape, f);
        let (aid, _) = self.input(a, name)?;
        let (bid, _) = self.input(b, name)?;
        Ok((out_shape, data, aid, bid))
    }

    pub fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data, aid, bid) = self.binary("add", a, b, |x, y| x + y)?;
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.out(
            shape,
            data,
            Op::Add {
                a: aid,
                b: bid,
                a_shape,
                b_shape,
            },
        ))
    }

    pub fn sub(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data, aid, bid) = self.binary("sub", a, b, |x, y| x - y)?;
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.out(
            shape,
            data,
            Op::Sub {
                a: aid,
                b: bid,
                a_shape,
                b_shape,
            },
        ))
    }

    pub fn mul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data, aid, bid) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.out(
            shape,
            data,
            Op::Mul {
                a: aid,
                b: bid,
                a_val: a.clone(),
                b_val: b.clone(),
            },
        ))
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: &Tensor<S>,
        f: impl Fn(S) -> S,
    ) -> Result<(Vec<usize>, Vec<S>, NodeId)> {
        let data: Vec<S> = x.data().iter().map(|&v| f(v)).collect();
        let (xid, _) = self.input(x, name)?;
        Ok((x.shape().to_vec(), data, xid))
    }

    pub fn relu(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data, xid) = self.unary("relu", x, |v| if v > S::zero() { v } else { S::zero() })?;
        Ok(self.out(
            shape,
            data,
            Op::Relu {
                x: xid,
                x_val: x.clone(),
            },
        ))
    }

    pub fn sigmoid(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        // Two-branch form: never exponentiates a large positive argument.
        let (shape, data, xid) = self.unary("sigmoid", x, |v| {
            if v >= S::zero() {
                S::one() / (S::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (S::one() + e)
            }
        })?;
        let out = self.out(shape, data, Op::Sigmoid { x: xid, out: Tensor::scalar(S::zero()) });
        self.patch_saved_output(&out);
        Ok(out)
    }

    pub fn exp(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data, xid) = self.unary("exp", x, |v| v.exp())?;
        let out = self.out(shape, data, Op::Exp { x: xid, out: Tensor::scalar(S::zero()) });
        self.patch_saved_output(&out);
        Ok(out)
    }

    /// Natural log. With clamping (default), inputs are floored at
    /// [`LOG_FLOOR`]; otherwise non-positive inputs are an error.
    pub fn log(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let floor = S::c(LOG_FLOOR);
        if !self.log_clamping {
            if let Some(bad) = x.data().iter().find(|v| **v <= S::zero()) {
                return Err(TensorError::LogDomain {
                    value: bad.to_f64(),
                });
            }
        }
        let clamped = self.log_clamping;
        let (shape, data, xid) = self.unary("log", x, |v| {
            if clamped && v < floor {
                floor.ln()
            } else {
                v.ln()
            }
        })?;
        Ok(self.out(
            shape,
            data,
            Op::Log {
                x: xid,
                x_val: x.clone(),
                clamped,
            },
        ))
    }

    pub fn neg(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data, xid) = self.unary("neg", x, |v| -v)?;
        Ok(self.out(shape, data, Op::Neg { x: xid }))
    }

    pub fn square(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data, xid) = self.unary("square", x, |v| v * v)?;
        Ok(self.out(
            shape,
            data,
            Op::Square {
                x: xid,
                x_val: x.clone(),
            },
        ))
    }

    pub fn scale(&mut self, x: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        let (shape, data, xid) = self.unary("scale", x, |v| v * c)?;
        Ok(self.out(shape, data, Op::Scale { x: xid, c }))
    }

    pub fn add_scalar(&mut self, x: &Tensor<S>, c: S) -> Result<Tensor<S>> {
        let (shape, data, xid) = self.unary("add_scalar", x, |v| v + c)?;
        Ok(self.out(shape, data, Op::AddScalar { x: xid }))
    }

    /// Hard clamp; gradient passes through strictly inside `[lo, hi]`.
    pub fn clamp(&mut self, x: &Tensor<S>, lo: S, hi: S) -> Result<Tensor<S>> {
        let (shape, data, xid) = self.unary("clamp", x, |v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        })?;
        Ok(self.out(
            shape,
            data,
            Op::Clamp {
                x: xid,
                x_val: x.clone(),
                lo,
                hi,
            },
        ))
    }

    pub fn sum_all(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let s: S = x.data().iter().copied().sum();
        let (xid, _) = self.input(x, "sum")?;
        Ok(self.out(vec![1], vec![s], Op::SumAll { x: xid, n: x.len() }))
    }

    pub fn mean_all(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.is_empty() {
            return Err(TensorError::EmptyInput { op: "mean" });
        }
        let s: S = x.data().iter().copied().sum();
        let n = x.len();
        let (xid, _) = self.input(x, "mean")?;
        Ok(self.out(
            vec![1],
            vec![s / S::c(n as f64)],
            Op::MeanAll { x: xid, n },
        ))
    }

    pub fn sum_lastdim(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let last = last_dim(x.shape());
        let out_shape = reduced_shape(x.shape());
        let data: Vec<S> = x.data().chunks(last).map(|c| c.iter().copied().sum()).collect();
        let (xid, _) = self.input(x, "sum_lastdim")?;
        Ok(self.out(out_shape, data, Op::SumLast { x: xid, last }))
    }

    pub fn broadcast_to(&mut self, x: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
        let ok = broadcast_shapes(x.shape(), shape).map_or(false, |s| s == shape);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let len: usize = shape.iter().product();
        let str = broadcast_strides(x.shape(), shape);
        let nd = shape.len();
        let mut idx = vec![0usize; nd];
        let mut xi = 0usize;
        let mut data = Vec::with_capacity(len);
        let xd = x.data();
        for _ in 0..len {
            data.push(xd[xi]);
            for d in (0..nd).rev() {
                idx[d] += 1;
                xi += str[d];
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
                xi -= str[d] * shape[d];
            }
        }
        let (xid, _) = self.input(x, "broadcast")?;
        Ok(self.out(
            shape.to_vec(),
            data,
            Op::BroadcastTo {
                x: xid,
                x_shape: x.shape().to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
        let want: usize = shape.iter().product();
        if want != x.len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: format!("{} elements", x.len()),
                got: shape.to_vec(),
            });
        }
        let (xid, _) = self.input(x, "reshape")?;
        Ok(self.out(
            shape.to_vec(),
            x.data().to_vec(),
            Op::Reshape {
                x: xid,
                x_shape: x.shape().to_vec(),
            },
        ))
    }

    pub fn transpose2d(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.ndim() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose2d",
                expected: "rank-2 tensor".into(),
                got: x.shape().to_vec(),
            });
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let data = transpose2d_raw(x.data(), r, c);
        let (xid, _) = self.input(x, "transpose2d")?;
        Ok(self.out(
            vec![c, r],
            data,
            Op::Transpose2d {
                x: xid,
                rows: r,
                cols: c,
            },
        ))
    }

    pub fn concat_lastdim(&mut self, parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let lead = &parts[0].shape()[..parts[0].ndim() - 1];
        for p in parts {
            if p.ndim() != lead.len() + 1 || &p.shape()[..lead.len()] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| last_dim(p.shape())).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut ids = Vec::with_capacity(parts.len());
        for (p, &w) in parts.iter().zip(&widths) {
            let (id, _) = self.input(p, "concat")?;
            ids.push((id, w));
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.out(shape, data, Op::ConcatLast { parts: ids }))
    }

    pub fn slice_lastdim(&mut self, x: &Tensor<S>, start: usize, len: usize) -> Result<Tensor<S>> {
        let last = last_dim(x.shape());
        if start + len > last {
            return Err(TensorError::BadShape {
                op: "slice",
                expected: format!("start+len <= {last}"),
                got: vec![start, len],
            });
        }
        let rows = x.len() / last;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * last + start..r * last + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let (xid, _) = self.input(x, "slice")?;
        Ok(self.out(
            shape,
            data,
            Op::SliceLast {
                x: xid,
                x_shape: x.shape().to_vec(),
                start,
                len,
            },
        ))
    }

    /// Select rows along the first axis (duplicates allowed).
    pub fn gather_rows(&mut self, x: &Tensor<S>, indices: &[usize]) -> Result<Tensor<S>> {
        let rows = x.shape()[0];
        let row_len = x.len() / rows.max(1);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::RowOutOfBounds { index: i, rows });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let (xid, _) = self.input(x, "gather")?;
        Ok(self.out(
            shape,
            data,
            Op::GatherRows {
                x: xid,
                rows,
                row_len,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn softmax_lastdim(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let last = last_dim(x.shape());
        let mut data = vec![S::zero(); x.len()];
        for (row, out) in x.data().chunks(last).zip(data.chunks_mut(last)) {
            softmax_row(row, out);
        }
        let (xid, _) = self.input(x, "softmax_lastdim")?;
        let out = self.out(
            x.shape().to_vec(),
            data,
            Op::SoftmaxLast { x: xid, out: Tensor::scalar(S::zero()) },
        );
        self.patch_saved_output(&out);
        Ok(out)
    }

    pub fn logsumexp_lastdim(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let last = last_dim(x.shape());
        let out_shape = reduced_shape(x.shape());
        let data: Vec<S> = x.data().chunks(last).map(logsumexp_row).collect();
        let (xid, _) = self.input(x, "logsumexp_lastdim")?;
        let out = self.out(
            out_shape,
            data,
            Op::LogsumexpLast {
                x: xid,
                x_val: x.clone(),
                out: Tensor::scalar(S::zero()),
            },
        );
        self.patch_saved_output(&out);
        Ok(out)
    }

    /// Max over the last dimension; ties resolve to the lowest index.
    pub fn max_lastdim(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let last = last_dim(x.shape());
        let out_shape = reduced_shape(x.shape());
        let mut data = Vec::with_capacity(x.len() / last);
        let mut argmax = Vec::with_capacity(x.len() / last);
        for row in x.data().chunks(last) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            data.push(row[best]);
            argmax.push(best);
        }
        let (xid, _) = self.input(x, "max_lastdim")?;
        Ok(self.out(out_shape, data, Op::MaxLast { x: xid, last, argmax }))
    }

    /// Saved-output ops record a placeholder first, then overwrite it with the
    /// actual output tensor so backward can read it without recomputation.
    fn patch_saved_output(&mut self, out: &Tensor<S>) {
        let id = out.node().unwrap().0;
        match &mut self.nodes[id].op {
            Op::Sigmoid { out: slot, .. }
            | Op::Exp { out: slot, .. }
            | Op::SoftmaxLast { out: slot, .. }
            | Op::LogsumexpLast { out: slot, .. } => *slot = out.detached(),
            _ => unreachable!("patch_saved_output on op without saved output"),
        }
    }

    // ───────────────────────── backward ─────────────────────────

    /// Gradients of a scalar loss with respect to every node on the tape.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<Gradients<S>> {
        let lid = match loss.node() {
            Some(id) if loss.tape_id() == self.id => id,
            Some(_) => return Err(TensorError::ForeignTape { op: "backward" }),
            None => return Err(TensorError::NotOnTape),
        };
        if loss.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[lid.0] = Some(vec![S::one()]);

        for i in (0..=lid.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            tape_id: self.id,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            grads,
        })
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out_shape = &node.shape;
        let mut acc = |id: NodeId, contrib: Vec<S>| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += *c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, a_val, b_val } => {
                let (m, k) = (a_val.shape()[0], a_val.shape()[1]);
                let n = b_val.shape()[1];
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                let bt = transpose2d_raw(b_val.data(), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                let at = transpose2d_raw(a_val.data(), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add { a, b, a_shape, b_shape } => {
                acc(*a, reduce_to_shape(g, out_shape, a_shape));
                acc(*b, reduce_to_shape(g, out_shape, b_shape));
            }
            Op::Sub { a, b, a_shape, b_shape } => {
                acc(*a, reduce_to_shape(g, out_shape, a_shape));
                let neg: Vec<S> = reduce_to_shape(g, out_shape, b_shape)
                    .into_iter()
                    .map(|v| -v)
                    .collect();
                acc(*b, neg);
            }
            Op::Mul { a, b, a_val, b_val } => {
                let da_full = binary_broadcast(g, out_shape, b_val.data(), b_val.shape(), out_shape, |x, y| x * y);
                acc(*a, reduce_to_shape(&da_full, out_shape, a_val.shape()));
                let db_full = binary_broadcast(g, out_shape, a_val.data(), a_val.shape(), out_shape, |x, y| x * y);
                acc(*b, reduce_to_shape(&db_full, out_shape, b_val.shape()));
            }
            Op::Relu { x, x_val } => {
                let dx = g
                    .iter()
                    .zip(x_val.data())
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                acc(*x, dx);
            }
            Op::Sigmoid { x, out } => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &o)| gv * o * (S::one() - o))
                    .collect();
                acc(*x, dx);
            }
            Op::Exp { x, out } => {
                let dx = g.iter().zip(out.data()).map(|(&gv, &o)| gv * o).collect();
                acc(*x, dx);
            }
            Op::Log { x, x_val, clamped } => {
                let floor = S::c(LOG_FLOOR);
                let dx = g
                    .iter()
                    .zip(x_val.data())
                    .map(|(&gv, &xv)| {
                        if *clamped && xv < floor {
                            S::zero()
                        } else {
                            gv / xv
                        }
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::Neg { x } => {
                acc(*x, g.iter().map(|&v| -v).collect());
            }
            Op::Square { x, x_val } => {
                let two = S::c(2.0);
                let dx = g
                    .iter()
                    .zip(x_val.data())
                    .map(|(&gv, &xv)| gv * two * xv)
                    .collect();
                acc(*x, dx);
            }
            Op::Scale { x, c } => {
                acc(*x, g.iter().map(|&v| v * *c).collect());
            }
            Op::AddScalar { x } => {
                acc(*x, g.to_vec());
            }
            Op::Clamp { x, x_val, lo, hi } => {
                let dx = g
                    .iter()
                    .zip(x_val.data())
                    .map(|(&gv, &xv)| if xv < *lo || xv > *hi { S::zero() } else { gv })
                    .collect();
                acc(*x, dx);
            }
            Op::SumAll { x, n } => {
                acc(*x, vec![g[0]; *n]);
            }
            Op::MeanAll { x, n } => {
                let s = g[0] / S::c(*n as f64);
                acc(*x, vec![s; *n]);
            }
            Op::SumLast { x, last } => {
                let mut dx = Vec::with_capacity(g.len() * last);
                for &gv in g {
                    for _ in 0..*last {
                        dx.push(gv);
                    }
                }
                acc(*x, dx);
            }
            Op::BroadcastTo { x, x_shape } => {
                acc(*x, reduce_to_shape(g, out_shape, x_shape));
            }
            Op::Reshape { x, x_shape } => {
                let _ = x_shape;
                acc(*x, g.to_vec());
            }
            Op::Transpose2d { x, rows, cols } => {
                // Output is cols×rows; transpose back.
                acc(*x, transpose2d_raw(g, *cols, *rows));
            }
            Op::ConcatLast { parts } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let rows = g.len() / total;
                let mut offset = 0usize;
                for (id, w) in parts {
                    let mut dx = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc(*id, dx);
                    offset += w;
                }
            }
            Op::SliceLast { x, x_shape, start, len } => {
                let last = *x_shape.last().unwrap();
                let rows = g.len() / len;
                let mut dx = vec![S::zero(); x_shape.iter().product()];
                for r in 0..rows {
                    dx[r * last + start..r * last + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::GatherRows { x, rows, row_len, indices } => {
                let mut dx = vec![S::zero(); rows * row_len];
                for (r, &src) in indices.iter().enumerate() {
                    let dst = &mut dx[src * row_len..(src + 1) * row_len];
                    for (d, &gv) in dst.iter_mut().zip(&g[r * row_len..(r + 1) * row_len]) {
                        *d += gv;
                    }
                }
                acc(*x, dx);
            }
            Op::SoftmaxLast { x, out } => {
                let last = last_dim(out.shape());
                let mut dx = vec![S::zero(); g.len()];
                for ((grow, orow), drow) in g
                    .chunks(last)
                    .zip(out.data().chunks(last))
                    .zip(dx.chunks_mut(last))
                {
                    let mut dot = S::zero();
                    for (gv, ov) in grow.iter().zip(orow) {
                        dot += *gv * *ov;
                    }
                    for ((d, &gv), &ov) in drow.iter_mut().zip(grow).zip(orow) {
                        *d = ov * (gv - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LogsumexpLast { x, x_val, out } => {
                let last = last_dim(x_val.shape());
                let mut dx = vec![S::zero(); x_val.len()];
                for (r, (xrow, drow)) in x_val
                    .data()
                    .chunks(last)
                    .zip(dx.chunks_mut(last))
                    .enumerate()
                {
                    let gv = g[r];
                    let o = out.data()[r];
                    for (d, &xv) in drow.iter_mut().zip(xrow) {
                        *d = gv * (xv - o).exp();
                    }
                }
                acc(*x, dx);
            }
            Op::MaxLast { x, last, argmax } => {
                let mut dx = vec![S::zero(); argmax.len() * last];
                for (r, &am) in argmax.iter().enumerate() {
                    dx[r * last + am] = g[r];
                }
                acc(*x, dx);
            }
        }
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

/// Result of [`Tape::backward`]: per-node gradients.
pub struct Gradients<S> {
    tape_id: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a tensor on the tape; zeros if no gradient flowed to it.
    pub fn of(&self, t: &Tensor<S>) -> Tensor<S> {
        match self.raw(t) {
            Some(g) => Tensor::from_vec(t.shape().to_vec(), g.to_vec()).unwrap(),
            None => Tensor::zeros(t.shape()),
        }
    }

    /// Raw gradient slice, `None` when no gradient reached the node.
    pub fn raw(&self, t: &Tensor<S>) -> Option<&[S]> {
        let id = t.node()?;
        if t.tape_id() != self.tape_id {
            return None;
        }
        debug_assert_eq!(self.shapes[id.0], t.shape());
        self.grads[id.0].as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.leaf(&T::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(&T::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
        assert_eq!(c.shape(), &[2, 1]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn logsumexp_matches_naive() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T::vector(vec![0.0, 0.0]));
        let y = tape.logsumexp_lastdim(&x).unwrap();
        assert!((y.item() - 2.0f64.ln()).abs() < 1e-15);
        // Naive route on a harder row.
        let row = [0.3, -1.2, 2.5, 0.0];
        let x2 = tape.leaf(&T::vector(row.to_vec()));
        let y2 = tape.logsumexp_lastdim(&x2).unwrap();
        let naive = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((y2.item() - naive).abs() < 1e-12);
    }

    #[test]
    fn grad_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T::vector(vec![1.0, 2.0]));
        let sq = tape.square(&x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T::vector(vec![0.0]));
        let y = tape.sigmoid(&x).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!((grads.of(&x).data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn grad_accumulates_across_uses() {
        // y = x*x_const + x  =>  dy/dx = c + 1 when x used twice
        let mut tape = Tape::new();
        let x = tape.leaf(&T::vector(vec![3.0]));
        let c = tape.leaf(&T::vector(vec![5.0]));
        let prod = tape.mul(&x, &c).unwrap();
        let sum = tape.add(&prod, &x).unwrap();
        let loss = tape.sum_all(&sum).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).data(), &[6.0]);
        assert_eq!(grads.of(&c).data(), &[3.0]);
    }

    #[test]
    fn unused_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(&T::vector(vec![7.0]));
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&unused).data(), &[0.0]);
        assert!(grads.raw(&unused).is_none());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&T::from_vec(vec![2, 2], vec![0.0; 4]).unwrap());
        let b = tape.leaf(&T::from_vec(vec![3, 1], vec![0.0; 3]).unwrap());
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 2]") && msg.contains("[3, 1]"));
    }

    #[test]
    fn backward_requires_scalar_and_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(&x),
            Err(TensorError::NonScalarLoss { .. })
        ));
        let detached = T::vector(vec![1.0]);
        assert!(matches!(
            tape.backward(&detached),
            Err(TensorError::NotOnTape)
        ));
    }

    #[test]
    fn log_clamps_by_default_and_errors_when_disabled() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T::vector(vec![0.0, 1.0]));
        let y = tape.log(&x).unwrap();
        assert!((y.data()[0] - LOG_FLOOR.ln()).abs() < 1e-12);
        assert_eq!(y.data()[1], 0.0);

        let mut strict = Tape::new().without_log_clamping();
        let x2 = strict.leaf(&T::vector(vec![-0.5]));
        assert!(matches!(
            strict.log(&x2),
            Err(TensorError::LogDomain { .. })
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(&T::from_vec(vec![37, 19], (0..703).map(|i| (i as f64).sin()).collect()).unwrap());
            let b = tape.leaf(&T::from_vec(vec![19, 23], (0..437).map(|i| (i as f64).cos()).collect()).unwrap());
            let c = tape.matmul(&a, &b).unwrap();
            let s = tape.sigmoid(&c).unwrap();
            let l = tape.sum_all(&s).unwrap();
            l.item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn max_lastdim_ties_take_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T::from_vec(vec![1, 3], vec![2.0, 2.0, 1.0]).unwrap());
        let y = tape.max_lastdim(&x).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_rows_backward_scatter_adds() {
        let mut tape = Tape::new();
        let x = tape.leaf(&T::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = tape.gather_rows(&x, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(&g).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
