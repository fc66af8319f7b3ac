use std::fmt;

use nalgebra::DMatrix;
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    Offset,
    ScaleBy,
    MatMul,
    Transpose,
    Inverse,
    Trace,
    Sum,
    SumSquares,
    FrobeniusNorm,
    Dot,
    Relu,
    Sqrt,
    Recip,
    AddRow,
    Reshape,
    SliceRows,
    Concat,
    Pack,
    Index,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    ScaleBy(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Inverse(NodeId),
    Trace(NodeId),
    Sum(NodeId),
    SumSquares(NodeId),
    FrobeniusNorm(NodeId),
    Dot(NodeId, NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    AddRow(NodeId, NodeId),
    Reshape(NodeId),
    SliceRows(NodeId, usize),
    Concat(Vec<NodeId>),
    Pack(Vec<NodeId>),
    Index(NodeId, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode tape. Values are computed eagerly as operations are recorded;
/// [`Tape::backward`] replays the record in reverse.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of `id`, or zeros shaped like `like` when the node did not
    /// influence the loss.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.adjoints.get_mut(id.0).and_then(Option::take)
    }
}

fn mismatch(op: OpKind, shapes: &[&Tensor]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn matmul_into(a: &[f64], (m, k): (usize, usize), b: &[f64], n: usize, out: &mut [f64]) {
    let av = ArrayView2::from_shape((m, k), a).expect("lhs layout");
    let bv = ArrayView2::from_shape((k, n), b).expect("rhs layout");
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("out layout");
    general_mat_mul(1.0, &av, &bv, 1.0, &mut cv);
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn record(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b)
            | Op::AddRow(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Transpose(a)
            | Op::Inverse(a)
            | Op::Trace(a)
            | Op::Sum(a)
            | Op::SumSquares(a)
            | Op::FrobeniusNorm(a)
            | Op::Relu(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Reshape(a)
            | Op::SliceRows(a, _)
            | Op::Index(a, _) => self.requires_grad(*a),
            Op::Concat(ids) | Op::Pack(ids) => ids.iter().any(|id| self.requires_grad(*id)),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn zip(
        &mut self,
        kind: OpKind,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(kind, &[va, vb]));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::new(va.shape().to_vec(), data).expect("same shape"))
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| f(*x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.zip(OpKind::Add, a, b, |x, y| x + y)?;
        Ok(self.record(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.zip(OpKind::Sub, a, b, |x, y| x - y)?;
        Ok(self.record(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.zip(OpKind::Mul, a, b, |x, y| x * y)?;
        Ok(self.record(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.map(a, |x| x * factor);
        self.record(Op::Scale(a, factor), v)
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> NodeId {
        let v = self.map(a, |x| x + shift);
        self.record(Op::Offset(a), v)
    }

    /// Multiply every entry of `a` by the one-element node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AutodiffError> {
        if !self.value(s).is_scalar() {
            return Err(mismatch(OpKind::ScaleBy, &[self.value(a), self.value(s)]));
        }
        let factor = self.value(s).item();
        let v = self.map(a, |x| x * factor);
        Ok(self.record(Op::ScaleBy(a, s), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = match va.shape() {
            [m, k] => (*m, *k),
            _ => return Err(mismatch(OpKind::MatMul, &[va, vb])),
        };
        let n = match vb.shape() {
            [k2, n] if *k2 == k => *n,
            _ => return Err(mismatch(OpKind::MatMul, &[va, vb])),
        };
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), (m, k), vb.data(), n, &mut out);
        let v = Tensor::new(vec![m, n], out).expect("matmul shape");
        Ok(self.record(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        let (r, c) = match va.shape() {
            [r, c] => (*r, *c),
            _ => return Err(mismatch(OpKind::Transpose, &[va])),
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data()[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], out).expect("transpose shape");
        Ok(self.record(Op::Transpose(a), v))
    }

    /// Matrix inverse with adjoint `-X^{-T} G X^{-T}`.
    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        let n = match va.shape() {
            [r, c] if r == c => *r,
            _ => return Err(mismatch(OpKind::Inverse, &[va])),
        };
        let m = DMatrix::from_row_slice(n, n, va.data());
        let inv = m.try_inverse().ok_or(AutodiffError::Singular { size: n })?;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(inv[(i, j)]);
            }
        }
        let v = Tensor::new(vec![n, n], out).expect("inverse shape");
        Ok(self.record(Op::Inverse(a), v))
    }

    pub fn trace(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        let n = match va.shape() {
            [r, c] if r == c => *r,
            _ => return Err(mismatch(OpKind::Trace, &[va])),
        };
        let t = (0..n).map(|i| va.data()[i * n + i]).sum();
        Ok(self.record(Op::Trace(a), Tensor::scalar(t)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.record(Op::Sum(a), Tensor::scalar(s))
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum_squares();
        self.record(Op::SumSquares(a), Tensor::scalar(s))
    }

    pub fn frobenius_norm(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum_squares().sqrt();
        self.record(Op::FrobeniusNorm(a), Tensor::scalar(s))
    }

    /// Sum of the elementwise product.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(OpKind::Dot, &[va, vb]));
        }
        let s = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        Ok(self.record(Op::Dot(a, b), Tensor::scalar(s)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x.max(0.0));
        self.record(Op::Relu(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, f64::sqrt);
        self.record(Op::Sqrt(a), v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| 1.0 / x);
        self.record(Op::Recip(a), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let r = self.recip(b);
        if self.value(b).is_scalar() && !self.value(a).is_scalar() {
            self.scale_by(a, r)
        } else {
            self.mul(a, r)
        }
    }

    /// Adds the row vector `row` to every row of the matrix `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vr) = (self.value(a), self.value(row));
        let (r, c) = match va.shape() {
            [r, c] => (*r, *c),
            _ => return Err(mismatch(OpKind::AddRow, &[va, vr])),
        };
        if vr.len() != c || vr.shape().len() != 1 {
            return Err(mismatch(OpKind::AddRow, &[va, vr]));
        }
        let mut out = va.data().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let v = Tensor::new(vec![r, c], out).expect("add_row shape");
        Ok(self.record(Op::AddRow(a, row), v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::Reshape,
                shapes: vec![va.shape().to_vec(), shape],
            });
        }
        let v = va.clone().with_shape(shape);
        Ok(self.record(Op::Reshape(a), v))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(
        &mut self,
        a: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        let (r, c) = match va.shape() {
            [r, c] => (*r, *c),
            _ => return Err(mismatch(OpKind::SliceRows, &[va])),
        };
        if start >= end || end > r {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::SliceRows,
                shapes: vec![va.shape().to_vec(), vec![start, end]],
            });
        }
        let v = Tensor::new(vec![end - start, c], va.data()[start * c..end * c].to_vec())
            .expect("slice shape");
        Ok(self.record(Op::SliceRows(a, start), v))
    }

    /// Concatenation along the last axis. All parts must share rank and leading dimension.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let Some(first) = vals.first() else {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::Concat,
                shapes: vec![],
            });
        };
        let rank = first.shape().len();
        let rows = first.dims2().map(|d| d.0);
        if rank > 2 || vals.iter().any(|v| v.shape().len() != rank || v.dims2().map(|d| d.0) != rows)
        {
            return Err(mismatch(OpKind::Concat, &vals));
        }
        let rows = rows.expect("rank <= 2");
        let total: usize = vals.iter().map(|v| v.dims2().expect("rank").1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for v in &vals {
                let c = v.dims2().expect("rank").1;
                out.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let v = Tensor::new(shape, out).expect("concat shape");
        Ok(self.record(Op::Concat(parts.to_vec()), v))
    }

    /// Assemble one-element nodes into a tensor of `shape` (row-major).
    pub fn pack(&mut self, scalars: &[NodeId], shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        if shape.iter().product::<usize>() != scalars.len()
            || scalars.iter().any(|s| !self.value(*s).is_scalar())
        {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::Pack,
                shapes: vec![shape, vec![scalars.len()]],
            });
        }
        let data = scalars.iter().map(|s| self.value(*s).item()).collect();
        let v = Tensor::new(shape, data).expect("pack shape");
        Ok(self.record(Op::Pack(scalars.to_vec()), v))
    }

    /// Entry `flat` (row-major) of `a` as a one-element node.
    pub fn index(&mut self, a: NodeId, flat: usize) -> Result<NodeId, AutodiffError> {
        let va = self.value(a);
        if flat >= va.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: OpKind::Index,
                shapes: vec![va.shape().to_vec(), vec![flat]],
            });
        }
        let v = Tensor::scalar(va.data()[flat]);
        Ok(self.record(Op::Index(a, flat), v))
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut adj);
            }
            adj[idx] = Some(g);
        }

        let adjoints = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(a, n)| a.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("adjoint shape")))
            .collect();
        Ok(Gradients { adjoints })
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulate into an input's adjoint buffer, allocating it on first touch.
        let mut with = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let buf = adj[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
            f(buf);
        };
        let val = |id: NodeId| &nodes[id.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                with(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                with(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                with(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                with(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                with(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => with(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::Offset(a) => with(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::ScaleBy(a, s) => {
                let factor = val(*s).item();
                with(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g));
                let va = val(*a).data();
                with(*s, &mut |d| d[0] += va.iter().zip(g).map(|(x, g)| x * g).sum::<f64>());
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let gv = ArrayView2::from_shape((m, n), g).expect("grad layout");
                with(*a, &mut |d| {
                    let bv = ArrayView2::from_shape((k, n), vb.data()).expect("rhs layout");
                    let mut dv = ArrayViewMut2::from_shape((m, k), d).expect("adj layout");
                    general_mat_mul(1.0, &gv, &bv.t(), 1.0, &mut dv);
                });
                with(*b, &mut |d| {
                    let av = ArrayView2::from_shape((m, k), va.data()).expect("lhs layout");
                    let mut dv = ArrayViewMut2::from_shape((k, n), d).expect("adj layout");
                    general_mat_mul(1.0, &av.t(), &gv, 1.0, &mut dv);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                with(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Inverse(a) => {
                // d(X^-1) = -X^-1 dX X^-1  =>  adj(X) = -Y^T G Y^T
                let y = &node.value;
                let n = y.shape()[0];
                let yv = ArrayView2::from_shape((n, n), y.data()).expect("inv layout");
                let gv = ArrayView2::from_shape((n, n), g).expect("grad layout");
                let tmp = yv.t().dot(&gv);
                with(*a, &mut |d| {
                    let mut dv = ArrayViewMut2::from_shape((n, n), d).expect("adj layout");
                    general_mat_mul(-1.0, &tmp, &yv.t(), 1.0, &mut dv);
                });
            }
            Op::Trace(a) => {
                let n = val(*a).shape()[0];
                with(*a, &mut |d| {
                    for i in 0..n {
                        d[i * n + i] += g[0];
                    }
                });
            }
            Op::Sum(a) => with(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::SumSquares(a) => {
                let va = val(*a).data();
                with(*a, &mut |d| d.iter_mut().zip(va).for_each(|(d, x)| *d += 2.0 * g[0] * x));
            }
            Op::FrobeniusNorm(a) => {
                let norm = node.value.item();
                if norm > 0.0 {
                    let va = val(*a).data();
                    with(*a, &mut |d| d.iter_mut().zip(va).for_each(|(d, x)| *d += g[0] * x / norm));
                }
            }
            Op::Dot(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                with(*a, &mut |d| d.iter_mut().zip(vb).for_each(|(d, y)| *d += g[0] * y));
                with(*b, &mut |d| d.iter_mut().zip(va).for_each(|(d, x)| *d += g[0] * x));
            }
            Op::Relu(a) => {
                let va = val(*a).data();
                with(*a, &mut |d| {
                    for i in 0..d.len() {
                        if va[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                with(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / (2.0 * y[i]);
                    }
                });
            }
            Op::Recip(a) => {
                let y = node.value.data();
                with(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * y[i] * y[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                with(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let c = val(*row).len();
                with(*row, &mut |d| {
                    for chunk in g.chunks(c) {
                        d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Reshape(a) => with(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::SliceRows(a, start) => {
                let c = val(*a).dims2().expect("rank 2").1;
                let off = start * c;
                with(*a, &mut |d| {
                    d[off..off + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g)
                });
            }
            Op::Concat(parts) => {
                let rows = node.value.dims2().expect("rank").0;
                let total = node.value.dims2().expect("rank").1;
                let mut col = 0;
                for p in parts {
                    let c = val(*p).dims2().expect("rank").1;
                    with(*p, &mut |d| {
                        for i in 0..rows {
                            let src = &g[i * total + col..i * total + col + c];
                            d[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    });
                    col += c;
                }
            }
            Op::Pack(scalars) => {
                for (i, s) in scalars.iter().enumerate() {
                    with(*s, &mut |d| d[0] += g[i]);
                }
            }
            Op::Index(a, flat) => with(*a, &mut |d| d[*flat] += g[0]),
        }
    }
}
