//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and, when any
//! input needs a gradient, enough information to run its backward rule.
//! Nodes are only ever appended, so inputs always precede their consumers
//! and the reverse sweep is a single pass from the loss down to index 0.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::sparse::SparseOp;
use crate::tensor::{matmul_nt, matmul_tn, mismatch, transpose_into, Tensor};

/// ELU slope parameter.
pub const ELU_ALPHA: f64 = 1.0;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Mean { x: Var, axis: usize },
    SumSq(Var),
    Sparse { x: Var, op: Arc<SparseOp>, channels: usize },
    Kernel { x: Var, theta: Var, op: Arc<SparseOp> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    leaves: Vec<(Var, Tensor)>,
    bindings: Vec<(Var, ParamId)>,
    /// Set when no differentiable leaf was reachable from the loss; every
    /// gradient is then zero.
    pub detached: bool,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(w, _)| *w == v).map(|(_, t)| t)
    }

    /// Gradients of bound parameters, summed over repeated bindings.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.bindings
            .iter()
            .filter_map(move |(v, id)| self.get(*v).map(|g| (*id, g)))
    }
}

/// Ordered record of executed operations.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bindings.clear();
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::StaleVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        self.node(v).map(|n| &n.value)
    }

    /// First element of a recorded value (the value of a scalar loss).
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input; differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let needs = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter. Trainable parameters are bound so that
    /// [`ParamStore::accumulate`] can route their gradients back.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let mut t = store.get(id).clone();
        t.requires_grad = trainable;
        let v = self.leaf(t);
        if trainable {
            self.bindings.push((v, id));
        }
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, op, needs, name)
    }

    fn map(&mut self, op: Op, x: Var, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let out = Tensor::new(tx.shape(), tx.data().iter().map(|v| f(*v)).collect())?;
        let needs = self.needs(x);
        self.push(out, op, needs, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let out = ta.matmul(tb)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), needs, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, "mul", |x, y| x * y)
    }

    fn row_broadcast(&mut self, x: Var, r: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul_row" } else { "add_row" };
        let (tx, tr) = (&self.node(x)?.value, &self.node(r)?.value);
        let c = last_dim(tx);
        if tr.len() != c {
            return Err(mismatch(name, tx, tr));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (v, b) in row.iter_mut().zip(tr.data()) {
                if mul {
                    *v *= b;
                } else {
                    *v += b;
                }
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        let needs = self.needs(x) || self.needs(r);
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        self.push(out, op, needs, name)
    }

    /// Adds a vector of length `last_dim(x)` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, false)
    }

    /// Multiplies every row of `x` elementwise by a vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, true)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(Op::Scale(x, s), x, "scale", |v| v * s)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Elu(x), x, "elu", |v| {
            if v > 0.0 {
                v
            } else {
                ELU_ALPHA * libm::expm1(v)
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(Op::Relu(x), x, "relu", |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let c = last_dim(tx).max(1);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - m);
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        let needs = self.needs(x);
        self.push(out, Op::Softmax(x), needs, "softmax")
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let c = last_dim(tx).max(1);
        let mut data = tx.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / c);
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(tx.shape(), data)?;
        let needs = self.needs(x);
        self.push(out, Op::LayerNorm { x, inv_std }, needs, "layer_norm")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.transpose()?;
        let needs = self.needs(x);
        self.push(out, Op::Transpose(x), needs, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(x)?.value.clone();
        let mut out = out.reshaped(shape)?;
        out.requires_grad = false;
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x), needs, "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = &self.node(*parts.first().ok_or_else(|| crate::error::invalid("concat of nothing"))?)?.value;
        if axis >= first.rank() {
            return Err(mismatch("concat", first, first));
        }
        let mut shape = first.shape().to_vec();
        let mut total = 0;
        for p in parts {
            let t = &self.node(*p)?.value;
            let ok = t.rank() == shape.len()
                && t.shape().iter().zip(&shape).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(mismatch("concat", first, t));
            }
            total += t.shape()[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let span = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
            "concat",
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let tx = &self.node(x)?.value;
        if axis >= tx.rank() || start > end || end > tx.shape()[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: tx.shape().to_vec(),
                rhs: vec![axis, start, end],
            });
        }
        let (outer, n, inner) = outer_inner(tx.shape(), axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&tx.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = end - start;
        let out = Tensor::new(&shape, data)?;
        let needs = self.needs(x);
        self.push(out, Op::Slice { x, axis, start }, needs, "slice")
    }

    /// Mean over `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.node(x)?.value;
        if axis >= tx.rank() {
            return Err(mismatch("mean", tx, tx));
        }
        let (outer, n, inner) = outer_inner(tx.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &tx.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for d in &mut data {
            *d /= n as f64;
        }
        let mut shape: Vec<usize> = tx.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(&shape, data)?;
        let needs = self.needs(x);
        self.push(out, Op::Mean { x, axis }, needs, "mean")
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.sum_sq();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumSq(x), needs, "sum_sq")
    }

    /// Square-matrix power by repeated multiplication (`k = 0` gives the identity).
    pub fn matrix_power(&mut self, a: Var, k: usize) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let n = match ta.shape() {
            [r, c] if r == c => *r,
            _ => return Err(mismatch("matrix_power", ta, ta)),
        };
        if k == 0 {
            return Ok(self.constant(Tensor::eye(n)));
        }
        let mut acc = a;
        for _ in 1..k {
            acc = self.matmul(acc, a)?;
        }
        Ok(acc)
    }

    /// Applies a sparse operator to `x`, viewed as rows of `channels` values.
    pub fn sparse(&mut self, op: &Arc<SparseOp>, x: Var, channels: usize) -> Result<Var> {
        let tx = &self.node(x)?.value;
        if channels == 0 || tx.len() % (op.cols() * channels) != 0 {
            return Err(Error::ShapeMismatch {
                op: "sparse",
                lhs: tx.shape().to_vec(),
                rhs: vec![op.rows(), op.cols(), op.slots()],
            });
        }
        let batch = tx.len() / (op.cols() * channels);
        let data = op.apply(tx.data(), channels);
        let out = Tensor::new(&[batch * op.rows(), op.slots() * channels], data)?;
        let needs = self.needs(x);
        self.push(
            out,
            Op::Sparse {
                x,
                op: Arc::clone(op),
                channels,
            },
            needs,
            "sparse",
        )
    }

    /// `sparse(op, x) · theta` fused: `theta` is `[slots·cin, cout]` and the
    /// slotted intermediate is never formed.
    pub fn sparse_kernel(&mut self, op: &Arc<SparseOp>, x: Var, theta: Var) -> Result<Var> {
        let (tx, tt) = (&self.node(x)?.value, &self.node(theta)?.value);
        let cin = last_dim(tx);
        let (rows_t, cout) = tt.dims2().ok_or_else(|| mismatch("sparse_kernel", tx, tt))?;
        if tx.rank() != 2 || cin == 0 || rows_t != op.slots() * cin || tx.len() % (op.cols() * cin) != 0 {
            return Err(mismatch("sparse_kernel", tx, tt));
        }
        let batch = tx.len() / (op.cols() * cin);
        let data = op.kernel_apply(tx.data(), tt.data(), cin, cout);
        let out = Tensor::new(&[batch * op.rows(), cout], data)?;
        let needs = self.needs(x) || self.needs(theta);
        self.push(
            out,
            Op::Kernel {
                x,
                theta,
                op: Arc::clone(op),
            },
            needs,
            "sparse_kernel",
        )
    }

    /// Computes gradients of a scalar `loss` and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lt = &self.node(loss)?.value;
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let nodes = core::mem::take(&mut self.nodes);
        let bindings = core::mem::take(&mut self.bindings);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            backprop(&nodes, &mut grads, &node.op, y, &g);
            if matches!(node.op, Op::Leaf) {
                leaves.push((Var(i), Tensor::new(y.shape(), g)?));
            }
        }
        leaves.reverse();
        let detached = leaves.is_empty();
        Ok(Gradients {
            leaves,
            bindings,
            detached,
        })
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[v.0].value.len()]);
    }
    slot.as_mut()
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], op: &Op, y: &Tensor, g: &[f64]) {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(a).dims2().unwrap();
            let n = val(b).dims2().unwrap().1;
            if let Some(ga) = acc(grads, nodes, *a) {
                matmul_nt(g, val(b).data(), ga, m, n, k);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                matmul_tn(val(a).data(), g, gb, m, k, n);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((d, s), bv) in ga.iter_mut().zip(g).zip(val(b).data()) {
                    *d += s * bv;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((d, s), av) in gb.iter_mut().zip(g).zip(val(a).data()) {
                    *d += s * av;
                }
            }
        }
        Op::AddRow(x, r) => {
            let c = val(r).len().max(1);
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if let Some(gr) = acc(grads, nodes, *r) {
                for row in g.chunks(c) {
                    gr.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::MulRow(x, r) => {
            let c = val(r).len().max(1);
            let rv = val(r).data().to_vec();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (grow, drow) in g.chunks(c).zip(gx.chunks_mut(c)) {
                    for ((d, s), w) in drow.iter_mut().zip(grow).zip(&rv) {
                        *d += s * w;
                    }
                }
            }
            if let Some(gr) = acc(grads, nodes, *r) {
                for (grow, xrow) in g.chunks(c).zip(val(x).data().chunks(c)) {
                    for ((d, s), xv) in gr.iter_mut().zip(grow).zip(xrow) {
                        *d += s * xv;
                    }
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
            }
        }
        Op::Elu(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), (xv, yv)) in gx.iter_mut().zip(g).zip(val(x).data().iter().zip(y.data())) {
                    *d += if *xv > 0.0 { *s } else { s * (yv + ELU_ALPHA) };
                }
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, s), xv) in gx.iter_mut().zip(g).zip(val(x).data()) {
                    if *xv > 0.0 {
                        *d += s;
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let c = last_dim(y).max(1);
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((drow, grow), yrow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let c = last_dim(y).max(1);
            if let Some(gx) = acc(grads, nodes, *x) {
                let rows = gx.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c));
                for (((drow, grow), yrow), is) in rows.zip(inv_std) {
                    let gm = grow.iter().sum::<f64>() / c as f64;
                    let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += is * (gv - gm - yv * gy);
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = val(x).dims2().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                let mut t = vec![0.0; r * c];
                transpose_into(g, &mut t, c, r);
                gx.iter_mut().zip(&t).for_each(|(d, s)| *d += s);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = outer_inner(y.shape(), *axis);
            let mut offset = 0;
            let total = y.shape()[*axis] * inner;
            for p in parts {
                let span = val(p).shape()[*axis] * inner;
                if let Some(gp) = acc(grads, nodes, *p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + span];
                        gp[o * span..(o + 1) * span]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                offset += span;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, n, inner) = outer_inner(val(x).shape(), *axis);
            let len = y.shape()[*axis];
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    gx[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Mean { x, axis } => {
            let (outer, n, inner) = outer_inner(val(x).shape(), *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                let inv = 1.0 / n as f64;
                for o in 0..outer {
                    for k in 0..n {
                        let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += s * inv;
                        }
                    }
                }
            }
        }
        Op::SumSq(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (d, xv) in gx.iter_mut().zip(val(x).data()) {
                    *d += 2.0 * g[0] * xv;
                }
            }
        }
        Op::Sparse { x, op, channels } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                op.apply_transpose_into(g, gx, *channels);
            }
        }
        Op::Kernel { x, theta, op } => {
            let cin = last_dim(val(x));
            let cout = last_dim(y);
            let (xv, tv) = (val(x).data(), val(theta).data());
            if let Some(gx) = acc(grads, nodes, *x) {
                op.kernel_backward(xv, tv, g, cin, cout, Some(gx), None);
            }
            if let Some(gt) = acc(grads, nodes, *theta) {
                op.kernel_backward(xv, tv, g, cin, cout, None, Some(gt));
            }
        }
    }
}

/// Plain forward evaluation of `x · W + b` without recording.
pub fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut out = x.matmul(w)?;
    if let Some(b) = b {
        let c = last_dim(&out);
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
    }
    Ok(out)
}
