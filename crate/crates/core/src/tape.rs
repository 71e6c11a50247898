//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every node value is a `rows x cols` matrix. Rollouts put the batch on
//! the row axis, so one tape records a whole batch of trajectories and the
//! parameters enter as small matrices shared by all rows. Binary
//! elementwise ops broadcast an operand whose row or column count is 1.
//!
//! Nodes that do not depend on any parameter are marked as constants and
//! are skipped by the backward sweep.

use std::fmt;

use thiserror::Error;

/// Index of a node in its tape.
pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: OpKind,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("parameter range {offset}..{end} exceeds parameter length {len}")]
    ParamRange { offset: usize, end: usize, len: usize },
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![value] }
    }

    /// A single row, used for per-feature constants broadcast over a batch.
    pub fn row(values: &[f64]) -> Self {
        Mat { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn col(values: &[f64]) -> Self {
        Mat { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    #[inline]
    fn bget(&self, r: usize, c: usize) -> f64 {
        let r = if self.rows == 1 { 0 } else { r };
        let c = if self.cols == 1 { 0 } else { c };
        self.data[r * self.cols + c]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sums the broadcast axes away so that the result has `shape`.
    fn reduce_to(self, shape: (usize, usize)) -> Mat {
        if self.shape() == shape {
            return self;
        }
        let mut out = Mat::zeros(shape.0, shape.1);
        for i in 0..self.rows {
            let oi = if shape.0 == 1 { 0 } else { i };
            for j in 0..self.cols {
                let oj = if shape.1 == 1 { 0 } else { j };
                out.data[oi * shape.1 + oj] += self.data[i * self.cols + j];
            }
        }
        out
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Mat { rows: n, cols: m, data: out }
}

/// `a * b^T`
fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Mat { rows: n, cols: m, data: out }
}

/// `a^T * b`
fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Mat { rows: k, cols: m, data: out }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Constant,
    Add,
    Sub,
    SchurMul,
    ScalarMul,
    MatVec,
    Concat,
    Slice,
    Sum,
    SumCols,
    Mean,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    PositivePart,
    MinConst,
    Dot,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input { param_offset: Option<usize> },
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    SchurMul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    MatVec(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Sum(NodeId),
    SumCols(NodeId),
    Mean(NodeId),
    Unary(OpKind, NodeId),
    MinConst(NodeId, f64),
    Dot(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

/// A record of one forward computation.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    param_len: usize,
    param_nodes: Vec<NodeId>,
}

impl Tape {
    /// Creates a tape whose gradients are vectors of length `param_len`.
    pub fn new(param_len: usize) -> Self {
        Tape { nodes: Vec::new(), param_len, param_nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn parameter_node_ids(&self) -> &[NodeId] {
        &self.param_nodes
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.shape()
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        match &self.nodes[id].op {
            Op::Input { .. } => OpKind::Input,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::SchurMul(..) => OpKind::SchurMul,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::MatVec(..) => OpKind::MatVec,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
            Op::Sum(..) => OpKind::Sum,
            Op::SumCols(..) => OpKind::SumCols,
            Op::Mean(..) => OpKind::Mean,
            Op::Unary(k, _) => *k,
            Op::MinConst(..) => OpKind::MinConst,
            Op::Dot(..) => OpKind::Dot,
        }
    }

    /// Ids of the nodes this node reads from.
    pub fn input_ids(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id].op {
            Op::Input { .. } | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::SchurMul(a, b) | Op::MatVec(a, b) | Op::Dot(a, b) => {
                vec![*a, *b]
            }
            Op::Concat(ids) => ids.clone(),
            Op::ScalarMul(a, _)
            | Op::Slice(a, _)
            | Op::Sum(a)
            | Op::SumCols(a)
            | Op::Mean(a)
            | Op::Unary(_, a)
            | Op::MinConst(a, _) => vec![*a],
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<&Node, TapeError> {
        self.nodes.get(id).ok_or(TapeError::UnknownNode(id))
    }

    /// Non-trainable data input.
    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(Op::Input { param_offset: None }, value, false)
    }

    /// Trainable input whose entries map to `offset..offset + value.len()` of
    /// the parameter vector.
    pub fn param(&mut self, value: Mat, offset: usize) -> Result<NodeId, TapeError> {
        let end = offset + value.data.len();
        if end > self.param_len {
            return Err(TapeError::ParamRange { offset, end, len: self.param_len });
        }
        let id = self.push(Op::Input { param_offset: Some(offset) }, value, true);
        self.param_nodes.push(id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Mat::scalar(value))
    }

    fn broadcast_shape(&self, kind: OpKind, a: NodeId, b: NodeId) -> Result<(usize, usize), TapeError> {
        let sa = self.check(a)?.value.shape();
        let sb = self.check(b)?.value.shape();
        let dim = |x: usize, y: usize| {
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        };
        match (dim(sa.0, sb.0), dim(sa.1, sb.1)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(TapeError::Shape { op: kind, lhs: sa, rhs: sb }),
        }
    }

    fn binary(
        &mut self,
        kind: OpKind,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, TapeError> {
        let (r, c) = self.broadcast_shape(kind, a, b)?;
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let data = if va.shape() == vb.shape() {
            va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut d = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    d.push(f(va.bget(i, j), vb.bget(i, j)));
                }
            }
            d
        };
        let op = match kind {
            OpKind::Add => Op::Add(a, b),
            OpKind::Sub => Op::Sub(a, b),
            OpKind::SchurMul => Op::SchurMul(a, b),
            _ => unreachable!("not a binary elementwise op"),
        };
        let g = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(op, Mat::new(r, c, data), g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(OpKind::Sub, a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.binary(OpKind::SchurMul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, TapeError> {
        let n = self.check(a)?;
        let (v, g) = (n.value.map(|x| s * x), n.needs_grad);
        Ok(self.push(Op::ScalarMul(a, s), v, g))
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, TapeError> {
        let k = self.scalar(c);
        self.add(a, k)
    }

    /// Matrix product `a * b`; with the batch on the rows of `a` this applies
    /// the linear map `b` to every sample.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let va = &self.check(a)?.value;
        let vb = &self.check(b)?.value;
        if va.cols != vb.rows {
            return Err(TapeError::Shape { op: OpKind::MatVec, lhs: va.shape(), rhs: vb.shape() });
        }
        let v = matmul(va, vb);
        let g = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(Op::MatVec(a, b), v, g))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, ids: &[NodeId]) -> Result<NodeId, TapeError> {
        let mut rows = None;
        let mut cols = 0;
        for &id in ids {
            let s = self.check(id)?.value.shape();
            match rows {
                None => rows = Some(s.0),
                Some(r) if r != s.0 => {
                    return Err(TapeError::Shape { op: OpKind::Concat, lhs: (r, cols), rhs: s })
                }
                _ => {}
            }
            cols += s.1;
        }
        let rows = rows.unwrap_or(0);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &id in ids {
                data.extend_from_slice(self.nodes[id].value.row_slice(i));
            }
        }
        let g = ids.iter().any(|&id| self.nodes[id].needs_grad);
        Ok(self.push(Op::Concat(ids.to_vec()), Mat::new(rows, cols, data), g))
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TapeError> {
        let va = &self.check(a)?.value;
        if start + len > va.cols {
            return Err(TapeError::Shape { op: OpKind::Slice, lhs: va.shape(), rhs: (start, len) });
        }
        let mut data = Vec::with_capacity(va.rows * len);
        for i in 0..va.rows {
            data.extend_from_slice(&va.row_slice(i)[start..start + len]);
        }
        let v = Mat::new(va.rows, len, data);
        let g = self.nodes[a].needs_grad;
        Ok(self.push(Op::Slice(a, start), v, g))
    }

    /// Sum of all entries, a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let n = self.check(a)?;
        let (v, g) = (Mat::scalar(n.value.data.iter().sum()), n.needs_grad);
        Ok(self.push(Op::Sum(a), v, g))
    }

    /// Per-row sum, an `rows x 1` node.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let n = self.check(a)?;
        let data = (0..n.value.rows).map(|i| n.value.row_slice(i).iter().sum()).collect();
        let (v, g) = (Mat::new(n.value.rows, 1, data), n.needs_grad);
        Ok(self.push(Op::SumCols(a), v, g))
    }

    /// Mean of all entries, a 1x1 node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let n = self.check(a)?;
        let len = n.value.data.len().max(1) as f64;
        let (v, g) = (Mat::scalar(n.value.data.iter().sum::<f64>() / len), n.needs_grad);
        Ok(self.push(Op::Mean(a), v, g))
    }

    fn unary(&mut self, kind: OpKind, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId, TapeError> {
        let n = self.check(a)?;
        let (v, g) = (n.value.map(f), n.needs_grad);
        Ok(self.push(Op::Unary(kind, a), v, g))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(OpKind::Relu, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `max(x, 0)`; same values as relu, kept as a separate kind for cost terms.
    pub fn positive_part(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(OpKind::PositivePart, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(OpKind::Sigmoid, a, sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(OpKind::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(OpKind::Log, a, f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(OpKind::Sqrt, a, f64::sqrt)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(OpKind::Square, a, |x| x * x)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.unary(OpKind::Abs, a, f64::abs)
    }

    /// `min(x, c)` for a constant `c`.
    pub fn min_const(&mut self, a: NodeId, c: f64) -> Result<NodeId, TapeError> {
        let n = self.check(a)?;
        let (v, g) = (n.value.map(|x| if x < c { x } else { c }), n.needs_grad);
        Ok(self.push(Op::MinConst(a, c), v, g))
    }

    /// Elementwise `min(a, b)` written as `b - relu(b - a)`.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let d = self.sub(b, a)?;
        let r = self.relu(d)?;
        self.sub(b, r)
    }

    /// Row-wise inner product, an `rows x 1` node. A `1 x c` operand is
    /// broadcast over the rows of the other.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (r, c) = self.broadcast_shape(OpKind::Dot, a, b)?;
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.1 != sb.1 {
            return Err(TapeError::Shape { op: OpKind::Dot, lhs: sa, rhs: sb });
        }
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let data = (0..r)
            .map(|i| (0..c).map(|j| va.bget(i, j) * vb.bget(i, j)).sum())
            .collect();
        let g = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        Ok(self.push(Op::Dot(a, b), Mat::new(r, 1, data), g))
    }

    /// Reverse sweep from a scalar root. Returns d(root)/d(theta) over the
    /// full parameter vector.
    pub fn backward(&self, root: NodeId) -> Result<Vec<f64>, TapeError> {
        let rn = self.check(root)?;
        if rn.value.shape() != (1, 1) {
            return Err(TapeError::NonScalarRoot(rn.value.shape()));
        }
        let mut grad = vec![0.0; self.param_len];
        if !rn.needs_grad {
            return Ok(grad);
        }
        let mut adj: Vec<Option<Mat>> = vec![None; root + 1];
        adj[root] = Some(Mat::scalar(1.0));

        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = adj[id].take() else { continue };
            self.propagate(id, dy, &mut adj, &mut grad);
        }
        Ok(grad)
    }

    fn accum(&self, adj: &mut [Option<Mat>], id: NodeId, contrib: Mat) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let contrib = contrib.reduce_to(self.nodes[id].value.shape());
        match &mut adj[id] {
            Some(m) => m.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, id: NodeId, dy: Mat, adj: &mut [Option<Mat>], grad: &mut [f64]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Input { param_offset } => {
                if let Some(off) = param_offset {
                    for (g, d) in grad[*off..*off + dy.data.len()].iter_mut().zip(&dy.data) {
                        *g += d;
                    }
                }
            }
            Op::Constant => {}
            Op::Add(a, b) => {
                if self.nodes[*a].needs_grad {
                    self.accum(adj, *a, dy.clone());
                }
                self.accum(adj, *b, dy);
            }
            Op::Sub(a, b) => {
                if self.nodes[*a].needs_grad {
                    self.accum(adj, *a, dy.clone());
                }
                self.accum(adj, *b, dy.map(|v| -v));
            }
            Op::SchurMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (r, c) = dy.shape();
                if self.nodes[*a].needs_grad {
                    let mut da = Mat::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            da.data[i * c + j] = dy.data[i * c + j] * vb.bget(i, j);
                        }
                    }
                    self.accum(adj, *a, da);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = Mat::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            db.data[i * c + j] = dy.data[i * c + j] * va.bget(i, j);
                        }
                    }
                    self.accum(adj, *b, db);
                }
            }
            Op::ScalarMul(a, s) => self.accum(adj, *a, dy.map(|v| s * v)),
            Op::MatVec(a, b) => {
                if self.nodes[*a].needs_grad {
                    self.accum(adj, *a, matmul_bt(&dy, &self.nodes[*b].value));
                }
                if self.nodes[*b].needs_grad {
                    self.accum(adj, *b, matmul_at(&self.nodes[*a].value, &dy));
                }
            }
            Op::Concat(ids) => {
                let mut start = 0;
                for &cid in ids {
                    let w = self.nodes[cid].value.cols;
                    if self.nodes[cid].needs_grad {
                        let mut part = Vec::with_capacity(dy.rows * w);
                        for i in 0..dy.rows {
                            part.extend_from_slice(&dy.row_slice(i)[start..start + w]);
                        }
                        self.accum(adj, cid, Mat::new(dy.rows, w, part));
                    }
                    start += w;
                }
            }
            Op::Slice(a, start) => {
                let src = &self.nodes[*a].value;
                let mut full = Mat::zeros(src.rows, src.cols);
                for i in 0..dy.rows {
                    let dst = &mut full.data[i * src.cols + start..i * src.cols + start + dy.cols];
                    dst.copy_from_slice(dy.row_slice(i));
                }
                self.accum(adj, *a, full);
            }
            Op::Sum(a) => {
                let (r, c) = self.nodes[*a].value.shape();
                self.accum(adj, *a, Mat::filled(r, c, dy.data[0]));
            }
            Op::SumCols(a) => {
                let (r, c) = self.nodes[*a].value.shape();
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    d.data[i * c..(i + 1) * c].fill(dy.data[i]);
                }
                self.accum(adj, *a, d);
            }
            Op::Mean(a) => {
                let (r, c) = self.nodes[*a].value.shape();
                let n = (r * c).max(1) as f64;
                self.accum(adj, *a, Mat::filled(r, c, dy.data[0] / n));
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[*a].value;
                let deriv = |i: usize| -> f64 {
                    let (xv, yv) = (x.data[i], y.data[i]);
                    match kind {
                        OpKind::Relu | OpKind::PositivePart => {
                            if xv > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        OpKind::Sigmoid => yv * (1.0 - yv),
                        OpKind::Exp => yv,
                        OpKind::Log => 1.0 / xv,
                        OpKind::Sqrt => {
                            if yv > 0.0 {
                                0.5 / yv
                            } else {
                                0.0
                            }
                        }
                        OpKind::Square => 2.0 * xv,
                        OpKind::Abs => {
                            if xv > 0.0 {
                                1.0
                            } else if xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!("not a unary op"),
                    }
                };
                let data = dy.data.iter().enumerate().map(|(i, d)| d * deriv(i)).collect();
                self.accum(adj, *a, Mat::new(dy.rows, dy.cols, data));
            }
            Op::MinConst(a, c) => {
                let x = &self.nodes[*a].value;
                let data = dy
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(d, &xv)| if xv < *c { *d } else { 0.0 })
                    .collect();
                self.accum(adj, *a, Mat::new(dy.rows, dy.cols, data));
            }
            Op::Dot(a, b) => {
                let (r, _) = dy.shape();
                let c = self.nodes[*a].value.cols;
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].needs_grad {
                    let mut da = Mat::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            da.data[i * c + j] = dy.data[i] * vb.bget(i, j);
                        }
                    }
                    self.accum(adj, *a, da);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = Mat::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            db.data[i * c + j] = dy.data[i] * va.bget(i, j);
                        }
                    }
                    self.accum(adj, *b, db);
                }
            }
        }
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Compares `grad` against central differences of `f` at `theta`.
///
/// Returns `max_i |fd_i - grad_i| / (|grad_i| + 1e-12)`. NaN anywhere makes
/// the result NaN.
pub fn finite_diff_check<F>(mut f: F, theta: &[f64], grad: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(theta.len(), grad.len(), "gradient length");
    let mut probe = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let up = f(&probe);
        probe[i] = theta[i] - step;
        let down = f(&probe);
        probe[i] = theta[i];
        let fd = (up - down) / (2.0 * step);
        let err = (fd - grad[i]).abs() / (grad[i].abs() + 1e-12);
        if err.is_nan() {
            return f64::NAN;
        }
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_fn(x: f64, build: impl Fn(&mut Tape, NodeId) -> NodeId) -> (f64, f64) {
        let mut t = Tape::new(1);
        let p = t.param(Mat::scalar(x), 0).unwrap();
        let y = build(&mut t, p);
        let root = t.sum(y).unwrap();
        (t.value(root).data()[0], t.backward(root).unwrap()[0])
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new(0);
        let x = t.input(Mat::row(&[-1.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn positive_part_values() {
        let mut t = Tape::new(0);
        let x = t.input(Mat::row(&[0.5, -0.3]));
        let y = t.positive_part(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.0]);
    }

    #[test]
    fn identity_matvec() {
        let mut t = Tape::new(0);
        let x = t.input(Mat::row(&[3.0, 4.0]));
        let eye = t.constant(Mat::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let y = t.matmul(x, eye).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new(0);
        let a = t.input(Mat::zeros(2, 3));
        let b = t.input(Mat::zeros(3, 2));
        let err = t.add(a, b).unwrap_err();
        assert_eq!(err, TapeError::Shape { op: OpKind::Add, lhs: (2, 3), rhs: (3, 2) });
        assert!(err.to_string().contains("Add"));
        assert!(matches!(t.matmul(a, a), Err(TapeError::Shape { op: OpKind::MatVec, .. })));
    }

    #[test]
    fn square_gradient() {
        let (v, g) = scalar_fn(3.0, |t, p| t.square(p).unwrap());
        assert_eq!(v, 9.0);
        assert_eq!(g, 6.0);
    }

    #[test]
    fn relu_flat_on_negatives() {
        let (_, g) = scalar_fn(-1.0, |t, p| t.relu(p).unwrap());
        assert_eq!(g, 0.0);
    }

    #[test]
    fn kinks_have_zero_subgradient() {
        for build in [
            |t: &mut Tape, p| t.relu(p).unwrap(),
            |t: &mut Tape, p| t.positive_part(p).unwrap(),
            |t: &mut Tape, p| t.abs(p).unwrap(),
        ] {
            let (_, g) = scalar_fn(0.0, build);
            assert_eq!(g, 0.0);
        }
        // min_const: value c dominates at equality
        let (_, g) = scalar_fn(2.0, |t, p| t.min_const(p, 2.0).unwrap());
        assert_eq!(g, 0.0);
        let (_, g) = scalar_fn(1.5, |t, p| t.min_const(p, 2.0).unwrap());
        assert_eq!(g, 1.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new(2);
        let p = t.param(Mat::row(&[1.0, 2.0]), 0).unwrap();
        assert_eq!(t.backward(p), Err(TapeError::NonScalarRoot((1, 2))));
    }

    #[test]
    fn param_range_checked() {
        let mut t = Tape::new(1);
        assert!(t.param(Mat::row(&[1.0, 2.0]), 0).is_err());
    }

    #[test]
    fn inputs_precede_node() {
        let mut t = Tape::new(2);
        let p = t.param(Mat::row(&[1.0, 2.0]), 0).unwrap();
        let c = t.constant(Mat::row(&[3.0, 4.0]));
        let s = t.mul(p, c).unwrap();
        let e = t.exp(s).unwrap();
        let cat = t.concat(&[e, p]).unwrap();
        let r = t.sum(cat).unwrap();
        for id in 0..t.len() {
            assert!(t.input_ids(id).iter().all(|&i| i < id));
        }
        assert_eq!(t.op_kind(r), OpKind::Sum);
        assert_eq!(t.parameter_node_ids(), &[p]);
    }

    #[test]
    fn quadratic_finite_difference() {
        let theta = [1.0, 2.0];
        let grad = [2.0, 4.0];
        let err = finite_diff_check(|th| th.iter().map(|x| x * x).sum(), &theta, &grad, 1e-5);
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn broadcast_gradients_reduce() {
        // f(b) = sum((X + b) * w) with b broadcast over rows
        let mut t = Tape::new(2);
        let x = t.input(Mat::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t.param(Mat::row(&[0.5, -0.5]), 0).unwrap();
        let w = t.constant(Mat::col(&[1.0, 2.0, 3.0]));
        let s = t.add(x, b).unwrap();
        let m = t.mul(s, w).unwrap();
        let r = t.sum(m).unwrap();
        assert_eq!(t.backward(r).unwrap(), vec![6.0, 6.0]);
    }

    #[test]
    fn nan_propagates_through_check() {
        let err = finite_diff_check(|_| f64::NAN, &[1.0], &[1.0], 1e-5);
        assert!(err.is_nan());
    }
}
