//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Node
//! ids are handed out in insertion order, which is also a topological order,
//! so [`Graph::backward`] is a single reverse sweep. Graphs are built fresh
//! for every forward/backward pass; parameter leaves borrow their tensors so
//! binding a large model costs nothing.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    AddCol(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    RowSoftmax(NodeId),
    LogSumExpRows(NodeId),
    LogSumExpCols(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    GatherEntries(NodeId, Vec<(usize, usize)>),
    Exp(NodeId),
    Log(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    Transpose(NodeId),
    Broadcast(NodeId),
    Block {
        body: NodeId,
        right: NodeId,
        bottom: NodeId,
        corner: NodeId,
    },
    ClampMin(NodeId, T),
}

enum Value<'p, T> {
    Borrowed(&'p Tensor<T>),
    Owned(Tensor<T>),
}

impl<T> Deref for Value<'_, T> {
    type Target = Tensor<T>;
    fn deref(&self) -> &Tensor<T> {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

struct Node<'p, T> {
    op: Op<T>,
    value: Value<'p, T>,
}

/// Single-use computation graph.
pub struct Graph<'p, T> {
    nodes: Vec<Node<'p, T>>,
}

/// Gradients of a scalar loss with respect to every node of a graph.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `node`; all zeros when the loss does not depend on it.
    pub fn get(&self, node: NodeId) -> Tensor<T> {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[node.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn is_reached(&self, node: NodeId) -> bool {
        self.grads[node.0].is_some()
    }
}

fn shape_err<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape {
        op,
        lhs: a.shape_string(),
        rhs: b.shape_string(),
    }
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.value(id).data()[0]
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        debug_assert!(!value.has_nan(), "NaN produced by {:?}", op_name(&op));
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that borrows its tensor (parameters).
    pub fn leaf(&mut self, tensor: &'p Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Value::Borrowed(tensor),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf owning its tensor (inputs and constants).
    pub fn constant(&mut self, tensor: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Value::Owned(tensor),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// `a + row` with `row` (1 x c) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut v = ta.clone();
        let r = tr.data();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(r) {
                *x = *x + b;
            }
        }
        Ok(self.push(Op::AddRow(a, row), v))
    }

    /// `a + col` with `col` (r x 1) broadcast over the columns of `a`.
    pub fn add_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("add_col", ta, tc));
        }
        let mut v = ta.clone();
        for i in 0..v.rows() {
            let b = tc.data()[i];
            v.row_mut(i).iter_mut().for_each(|x| *x = *x + b);
        }
        Ok(self.push(Op::AddCol(a, col), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu(a), v)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let v = row_softmax(self.value(a));
        self.push(Op::RowSoftmax(a), v)
    }

    /// Row-wise log-sum-exp, `r x c -> r x 1`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| logsumexp(t.row(r))).collect();
        let v = Tensor::from_vec(t.rows(), 1, data).expect("shape");
        self.push(Op::LogSumExpRows(a), v)
    }

    /// Column-wise log-sum-exp, `r x c -> 1 x c`.
    pub fn logsumexp_cols(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.cols());
        let mut col = vec![T::zero(); t.rows()];
        for c in 0..t.cols() {
            for (r, x) in col.iter_mut().enumerate() {
                *x = t[(r, c)];
            }
            data.push(logsumexp(&col));
        }
        let v = Tensor::from_vec(1, t.cols(), data).expect("shape");
        self.push(Op::LogSumExpCols(a), v)
    }

    /// `x - logsumexp_rows(x)` broadcast back over columns.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let lse = self.logsumexp_rows(a);
        let neg = self.scale(lse, -T::one());
        self.add_col(a, neg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                v.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape_string(),
                rhs: format!("{start}..{end}"),
            });
        }
        let mut v = Tensor::zeros(t.rows(), end - start);
        for r in 0..t.rows() {
            v.row_mut(r).copy_from_slice(&t.row(r)[start..end]);
        }
        Ok(self.push(Op::SliceCols(a, start), v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: t.shape_string(),
                rhs: format!("{start}..{end}"),
            });
        }
        let c = t.cols();
        let v = Tensor::from_vec(end - start, c, t.data()[start * c..end * c].to_vec())?;
        Ok(self.push(Op::SliceRows(a, start), v))
    }

    /// Stack `a[idx[0]], a[idx[1]], ...` as rows; indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::Shape {
                    op: "gather_rows",
                    lhs: t.shape_string(),
                    rhs: format!("row {i}"),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_vec(idx.len(), t.cols(), data)?;
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), v))
    }

    /// Column vector of the selected entries.
    pub fn gather_entries(&mut self, a: NodeId, idx: &[(usize, usize)]) -> Result<NodeId> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= t.rows() || c >= t.cols() {
                return Err(Error::Shape {
                    op: "gather_entries",
                    lhs: t.shape_string(),
                    rhs: format!("({r},{c})"),
                });
            }
            data.push(t[(r, c)]);
        }
        let v = Tensor::from_vec(idx.len(), 1, data)?;
        Ok(self.push(Op::GatherEntries(a, idx.to_vec()), v))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), v)
    }

    /// Natural log; any entry `<= 0` is rejected.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::domain(
                "log",
                format!("non-positive entry {:?} in {}", bad, t.shape_string()),
            ));
        }
        let v = t.map(|x| x.ln());
        Ok(self.push(Op::Log(a), v))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::from_vec(t.rows(), 1, t.row_sums()).expect("shape");
        self.push(Op::SumRows(a), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Repeats a `1 x 1` node into a `rows x cols` block.
    pub fn broadcast(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let t = self.value(a);
        if t.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "broadcast",
                lhs: t.shape_string(),
                rhs: format!("{rows}x{cols}"),
            });
        }
        let v = Tensor::filled(rows, cols, t.data()[0]);
        Ok(self.push(Op::Broadcast(a), v))
    }

    /// `[[body, right], [bottom, corner]]` with `right: r x 1`, `bottom: 1 x c`
    /// and `corner: 1 x 1`.
    pub fn block(
        &mut self,
        body: NodeId,
        right: NodeId,
        bottom: NodeId,
        corner: NodeId,
    ) -> Result<NodeId> {
        let (b, r, bt, c) = (
            self.value(body),
            self.value(right),
            self.value(bottom),
            self.value(corner),
        );
        if r.shape() != (b.rows(), 1) {
            return Err(shape_err("block(right)", b, r));
        }
        if bt.shape() != (1, b.cols()) {
            return Err(shape_err("block(bottom)", b, bt));
        }
        if c.shape() != (1, 1) {
            return Err(shape_err("block(corner)", b, c));
        }
        let (m, n) = b.shape();
        let mut v = Tensor::zeros(m + 1, n + 1);
        for i in 0..m {
            v.row_mut(i)[..n].copy_from_slice(b.row(i));
            v[(i, n)] = r.data()[i];
        }
        v.row_mut(m)[..n].copy_from_slice(bt.data());
        v[(m, n)] = c.data()[0];
        Ok(self.push(
            Op::Block {
                body,
                right,
                bottom,
                corner,
            },
            v,
        ))
    }

    /// `max(x, floor)`; the gradient is blocked where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, floor: T) -> NodeId {
        let v = self.value(a).map(|x| if x > floor { x } else { floor });
        self.push(Op::ClampMin(a, floor), v)
    }

    /// Backpropagates from a `1 x 1` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: lt.shape_string(),
                rhs: "1x1".into(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(1, 1));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out: &Tensor<T> = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc_with(grads, *a, ta.shape(), |d| gemm_nt(g, tb, d));
                acc_with(grads, *b, tb.shape(), |d| gemm_tn(ta, g, d));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::AddRow(a, r) => {
                acc(grads, *a, g.clone());
                let cs = g.col_sums();
                acc(grads, *r, Tensor::from_vec(1, cs.len(), cs).expect("shape"));
            }
            Op::AddCol(a, c) => {
                acc(grads, *a, g.clone());
                let rs = g.row_sums();
                acc(grads, *c, Tensor::from_vec(rs.len(), 1, rs).expect("shape"));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.zip_map(tb, |x, y| x * y));
                acc(grads, *b, g.zip_map(ta, |x, y| x * y));
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(grads, *a, g.map(|x| x * s));
            }
            Op::Relu(a) => {
                acc(
                    grads,
                    *a,
                    g.zip_map(out, |d, y| if y > T::zero() { d } else { T::zero() }),
                );
            }
            Op::RowSoftmax(a) => {
                let mut d = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot = y.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    for ((o, &p), &q) in d.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                acc(grads, *a, d);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (lse, gr) = (out.data()[r], g.data()[r]);
                    for (o, &v) in d.row_mut(r).iter_mut().zip(x.row(r)) {
                        *o = gr * (v - lse).exp();
                    }
                }
                acc(grads, *a, d);
            }
            Op::LogSumExpCols(a) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = g.data()[c] * (x[(r, c)] - out.data()[c]).exp();
                    }
                }
                acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    acc(grads, p, d);
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let shape = self.value(*a).shape();
                acc_with(grads, *a, shape, |d| {
                    for r in 0..g.rows() {
                        for (o, &x) in d.row_mut(r)[*start..].iter_mut().zip(g.row(r)) {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    let d = Tensor::from_vec(h, c, g.data()[off * c..(off + h) * c].to_vec())
                        .expect("shape");
                    acc(grads, p, d);
                    off += h;
                }
            }
            Op::SliceRows(a, start) => {
                let shape = self.value(*a).shape();
                let c = shape.1;
                acc_with(grads, *a, shape, |d| {
                    let dst = &mut d.data_mut()[start * c..start * c + g.len()];
                    for (o, &x) in dst.iter_mut().zip(g.data()) {
                        *o = *o + x;
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let shape = self.value(*a).shape();
                acc_with(grads, *a, shape, |d| {
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &x) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::GatherEntries(a, idx) => {
                let shape = self.value(*a).shape();
                acc_with(grads, *a, shape, |d| {
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        d[(r, c)] = d[(r, c)] + g.data()[k];
                    }
                });
            }
            Op::Exp(a) => acc(grads, *a, g.zip_map(out, |d, y| d * y)),
            Op::Log(a) => acc(grads, *a, g.zip_map(self.value(*a), |d, x| d / x)),
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    d.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                acc(grads, *a, d);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Broadcast(a) => acc(grads, *a, Tensor::scalar(g.sum())),
            Op::Block {
                body,
                right,
                bottom,
                corner,
            } => {
                let (m, n) = self.value(*body).shape();
                let mut db = Tensor::zeros(m, n);
                let mut dr = Tensor::zeros(m, 1);
                for i in 0..m {
                    db.row_mut(i).copy_from_slice(&g.row(i)[..n]);
                    dr.data_mut()[i] = g[(i, n)];
                }
                let dbt = Tensor::from_vec(1, n, g.row(m)[..n].to_vec()).expect("shape");
                acc(grads, *body, db);
                acc(grads, *right, dr);
                acc(grads, *bottom, dbt);
                acc(grads, *corner, Tensor::scalar(g[(m, n)]));
            }
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                acc(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |d, x| if x > floor { d } else { T::zero() }),
                );
            }
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, d: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn acc_with<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    id: NodeId,
    shape: (usize, usize),
    f: impl FnOnce(&mut Tensor<T>),
) {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape.0, shape.1));
    }
    f(slot.as_mut().expect("just filled"));
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::AddRow(..) => "add_row",
        Op::AddCol(..) => "add_col",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::RowSoftmax(..) => "row_softmax",
        Op::LogSumExpRows(..) => "logsumexp_rows",
        Op::LogSumExpCols(..) => "logsumexp_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows(..) => "slice_rows",
        Op::GatherRows(..) => "gather_rows",
        Op::GatherEntries(..) => "gather_entries",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::SumAll(..) => "sum_all",
        Op::SumRows(..) => "sum_rows",
        Op::Transpose(..) => "transpose",
        Op::Broadcast(..) => "broadcast",
        Op::Block { .. } => "block",
        Op::ClampMin(..) => "clamp_min",
    }
}

/// Numerically stable `ln(sum(exp(xs)))`.
pub fn logsumexp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if !max.is_finite() {
        return max;
    }
    let s = xs.iter().fold(T::zero(), |s, &x| s + (x - max).exp());
    max + s.ln()
}

pub fn row_softmax<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut v = t.clone();
    for r in 0..v.rows() {
        let row = v.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut s = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            s = s + *x;
        }
        row.iter_mut().for_each(|x| *x = *x / s);
    }
    v
}

/// Largest relative deviation between the analytic gradient and central
/// differences, `|analytic - numeric| / max(1, |analytic|)`, over every
/// coordinate of every input.
pub fn gradient_check_many<F>(build: F, points: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &[NodeId]) -> Result<NodeId>,
{
    let analytic: Vec<Tensor<f64>> = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = points.iter().map(|p| g.leaf(p)).collect();
        let loss = build(&mut g, &ids)?;
        let grads = g.backward(loss)?;
        ids.iter().map(|&id| grads.get(id)).collect()
    };
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = pts.iter().map(|p| g.leaf(p)).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.scalar_value(loss))
    };
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..points[k].len() {
            let x0 = points[k].data()[i];
            work[k].data_mut()[i] = x0 + step;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - step;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`gradient_check_many`].
pub fn gradient_check<F>(build: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, NodeId) -> Result<NodeId>,
{
    gradient_check_many(
        |g, ids| build(g, ids[0]),
        core::slice::from_ref(point),
        step,
    )
}
