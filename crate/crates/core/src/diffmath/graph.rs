//! Reverse-mode differentiation over dense 2-D matrices.
//!
//! Nodes live in an append-only tape owned by a [`Graph`]; creation order is a
//! topological order, so the backward pass is a single reverse sweep. A graph is
//! confined to one thread of control; independent graphs may run in parallel.

use crate::diffmath::Matrix;
use crate::{Error, Result};

/// Handle to a node inside one [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    NormalizeColumns { input: NodeId, eps: f64 },
    RowSoftmax { input: NodeId, temperature: f64 },
    Hinge(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale { input: NodeId, factor: f64 },
    AddScalar(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SubIdentity(NodeId),
    // Argmax positions are fixed at forward time; ties break to the lowest index.
    RowMaxExcludingDiag { input: NodeId, argmax: Vec<usize> },
    ColMaxExcludingDiag { input: NodeId, argmax: Vec<usize> },
    ExtractDiag(NodeId),
    Gather { input: NodeId, indices: Vec<(usize, usize)> },
    AddColVector { matrix: NodeId, column: NodeId },
    ConcatCols(NodeId, NodeId),
}

struct NodeData {
    value: Matrix,
    grad: Matrix,
    op: Op,
}

/// A single-use computation tape. Build the forward graph, call [`Graph::backward`]
/// once, read gradients, then either drop it or call [`Graph::reset_gradients`]
/// before running backward again.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeData>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(NodeData { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input matrix. Leaves are both trainable parameters and
    /// constants; the caller decides whose gradients to read.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transposed();
        self.push(value, Op::Transpose(a))
    }

    pub fn l2_normalize_columns(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Param {
                op: "l2_normalize_columns",
                detail: format!("eps must be > 0, got {eps}"),
            });
        }
        let value = self.value(a).l2_normalized_columns(eps);
        Ok(self.push(value, Op::NormalizeColumns { input: a, eps }))
    }

    pub fn row_softmax(&mut self, a: NodeId, temperature: f64) -> Result<NodeId> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Param {
                op: "row_softmax",
                detail: format!("temperature must be positive and finite, got {temperature}"),
            });
        }
        let value = self.value(a).row_softmax(temperature);
        Ok(self.push(value, Op::RowSoftmax { input: a, temperature }))
    }

    /// Elementwise max(0, x); subgradient at 0 is 0. NaN passes through
    /// (f64::max would swallow it), so divergence stays visible in the loss.
    pub fn hinge(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        self.push(value, Op::Hinge(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Elementwise log(1 + e^x), computed overflow-safely.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a))
    }

    /// Elementwise |x|; subgradient at 0 is 0.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale { input: a, factor })
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> NodeId {
        let value = self.value(a).map(|v| v + offset);
        self.push(value, Op::AddScalar(a))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(total), Op::Sum(a))
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mean = v.data().iter().sum::<f64>() / v.data().len() as f64;
        self.push(Matrix::scalar(mean), Op::Mean(a))
    }

    /// A - I for square A.
    pub fn sub_identity(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(Error::Shape {
                op: "sub_identity",
                detail: format!("requires a square matrix, got {r}x{c}"),
            });
        }
        let mut value = self.value(a).clone();
        for i in 0..r {
            value.add_at(i, i, -1.0);
        }
        Ok(self.push(value, Op::SubIdentity(a)))
    }

    /// Per-row maximum over off-diagonal entries of a square matrix, as n x 1.
    /// The gradient routes to the argmax entry; ties break to the lowest column.
    pub fn row_max_excluding_diag(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.check_square_min2("row_col_max_excluding_diag", a)?;
        let v = self.value(a);
        let mut out = Matrix::zeros(n, 1);
        let mut argmax = Vec::with_capacity(n);
        for i in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut best_j = usize::MAX;
            for j in 0..n {
                if j != i && v.get(i, j) > best {
                    best = v.get(i, j);
                    best_j = j;
                }
            }
            if best_j == usize::MAX {
                // All off-diagonal entries NaN: keep propagating NaN.
                best_j = if i == 0 { 1 } else { 0 };
                best = v.get(i, best_j);
            }
            out.set(i, 0, best);
            argmax.push(best_j);
        }
        Ok(self.push(out, Op::RowMaxExcludingDiag { input: a, argmax }))
    }

    /// Per-column maximum over off-diagonal entries of a square matrix, as n x 1.
    pub fn col_max_excluding_diag(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.check_square_min2("row_col_max_excluding_diag", a)?;
        let v = self.value(a);
        let mut out = Matrix::zeros(n, 1);
        let mut argmax = Vec::with_capacity(n);
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = usize::MAX;
            for i in 0..n {
                if i != j && v.get(i, j) > best {
                    best = v.get(i, j);
                    best_i = i;
                }
            }
            if best_i == usize::MAX {
                best_i = if j == 0 { 1 } else { 0 };
                best = v.get(best_i, j);
            }
            out.set(j, 0, best);
            argmax.push(best_i);
        }
        Ok(self.push(out, Op::ColMaxExcludingDiag { input: a, argmax }))
    }

    /// Diagonal of a square matrix, as n x 1.
    pub fn extract_diag(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(Error::Shape {
                op: "extract_diag",
                detail: format!("requires a square matrix, got {r}x{c}"),
            });
        }
        let v = self.value(a);
        let out = Matrix::from_fn(r, 1, |i, _| v.get(i, i));
        Ok(self.push(out, Op::ExtractDiag(a)))
    }

    /// Selects entries at the given (row, col) positions into a len x 1 node.
    pub fn gather(&mut self, a: NodeId, indices: Vec<(usize, usize)>) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if indices.is_empty() {
            return Err(Error::Degenerate {
                op: "gather",
                detail: "empty index list".into(),
            });
        }
        for &(i, j) in &indices {
            if i >= r || j >= c {
                return Err(Error::Shape {
                    op: "gather",
                    detail: format!("index ({i},{j}) out of range for {r}x{c}"),
                });
            }
        }
        let v = self.value(a);
        let out = Matrix::from_fn(indices.len(), 1, |k, _| {
            let (i, j) = indices[k];
            v.get(i, j)
        });
        Ok(self.push(out, Op::Gather { input: a, indices }))
    }

    /// Adds a rows x 1 column vector to every column of a rows x cols matrix.
    pub fn add_col_vector(&mut self, matrix: NodeId, column: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(matrix);
        let (br, bc) = self.shape(column);
        if br != r || bc != 1 {
            return Err(Error::Shape {
                op: "add_col_vector",
                detail: format!("matrix is {r}x{c}, column must be {r}x1, got {br}x{bc}"),
            });
        }
        let m = self.value(matrix);
        let b = self.value(column);
        let mut out = m.clone();
        for i in 0..r {
            let bias = b.get(i, 0);
            for j in 0..c {
                out.add_at(i, j, bias);
            }
        }
        Ok(self.push(out, Op::AddColVector { matrix, column }))
    }

    /// Horizontal concatenation [A | B] of matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: format!("row counts differ: {ar}x{ac} vs {br}x{bc}"),
            });
        }
        let va = self.value(a);
        let vb = self.value(b);
        let out = Matrix::from_fn(ar, ac + bc, |i, j| {
            if j < ac {
                va.get(i, j)
            } else {
                vb.get(i, j - ac)
            }
        });
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Seeds dL/dL = 1 and accumulates gradients for every node in reverse
    /// topological order. Repeated calls require [`Graph::reset_gradients`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        if self.backward_done {
            return Err(Error::BackwardWithoutReset);
        }
        self.backward_done = true;
        self.nodes[loss.0].grad.set(0, 0, 1.0);
        for idx in (0..self.nodes.len()).rev() {
            self.propagate(idx);
        }
        Ok(())
    }

    /// Zeroes all gradients so backward may run again on the same tape.
    pub fn reset_gradients(&mut self) {
        for node in &mut self.nodes {
            let (r, c) = node.value.shape();
            node.grad = Matrix::zeros(r, c);
        }
        self.backward_done = false;
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let va = self.value(a);
        let vb = self.value(b);
        Matrix::from_fn(va.rows(), va.cols(), |i, j| f(va.get(i, j), vb.get(i, j)))
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape {
                op,
                detail: format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            });
        }
        Ok(())
    }

    fn check_square_min2(&self, op: &'static str, a: NodeId) -> Result<usize> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(Error::Shape {
                op,
                detail: format!("requires a square matrix, got {r}x{c}"),
            });
        }
        if r < 2 {
            return Err(Error::Degenerate {
                op,
                detail: format!("requires n >= 2, got {r}x{c}"),
            });
        }
        Ok(r)
    }

    fn propagate(&mut self, idx: usize) {
        let op = self.nodes[idx].op.clone();
        let grad = self.nodes[idx].grad.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // dA += G B^T, dB += A^T G
                let da = grad.matmul(&self.nodes[b.0].value.transposed()).unwrap();
                let db = self.nodes[a.0].value.transposed().matmul(&grad).unwrap();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Transpose(a) => {
                self.accumulate(a, &grad.transposed());
            }
            Op::NormalizeColumns { input, eps } => {
                let x = &self.nodes[input.0].value;
                let y = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for j in 0..x.cols() {
                    let norm = x.column_norm(j);
                    if norm >= eps {
                        // d x_j = (g - y (y . g)) / ||x_j||
                        let dot: f64 = (0..x.rows()).map(|i| y.get(i, j) * grad.get(i, j)).sum();
                        for i in 0..x.rows() {
                            dx.set(i, j, (grad.get(i, j) - y.get(i, j) * dot) / norm);
                        }
                    } else {
                        // Below eps the map is x / eps, a plain scaling.
                        for i in 0..x.rows() {
                            dx.set(i, j, grad.get(i, j) / eps);
                        }
                    }
                }
                self.accumulate(input, &dx);
            }
            Op::RowSoftmax { input, temperature } => {
                let y = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = (0..y.cols()).map(|j| grad.get(i, j) * y.get(i, j)).sum();
                    for j in 0..y.cols() {
                        dx.set(i, j, temperature * y.get(i, j) * (grad.get(i, j) - dot));
                    }
                }
                self.accumulate(input, &dx);
            }
            Op::Hinge(a) => {
                let x = &self.nodes[a.0].value;
                let dx = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    if x.get(i, j) > 0.0 {
                        grad.get(i, j)
                    } else {
                        0.0
                    }
                });
                self.accumulate(a, &dx);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let dx = Matrix::from_fn(y.rows(), y.cols(), |i, j| {
                    grad.get(i, j) * (1.0 - y.get(i, j) * y.get(i, j))
                });
                self.accumulate(a, &dx);
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                let dx = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    grad.get(i, j) * sigmoid(x.get(i, j))
                });
                self.accumulate(a, &dx);
            }
            Op::Abs(a) => {
                let x = &self.nodes[a.0].value;
                let dx = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    let v = x.get(i, j);
                    if v > 0.0 {
                        grad.get(i, j)
                    } else if v < 0.0 {
                        -grad.get(i, j)
                    } else {
                        0.0
                    }
                });
                self.accumulate(a, &dx);
            }
            Op::Add(a, b) => {
                self.accumulate(a, &grad);
                self.accumulate(b, &grad);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, &grad);
                let neg = grad.map(|v| -v);
                self.accumulate(b, &neg);
            }
            Op::Scale { input, factor } => {
                let dx = grad.map(|v| v * factor);
                self.accumulate(input, &dx);
            }
            Op::AddScalar(a) => {
                self.accumulate(a, &grad);
            }
            Op::Sum(a) => {
                let g = grad.get(0, 0);
                let (r, c) = self.nodes[a.0].value.shape();
                let dx = Matrix::from_fn(r, c, |_, _| g);
                self.accumulate(a, &dx);
            }
            Op::Mean(a) => {
                let (r, c) = self.nodes[a.0].value.shape();
                let g = grad.get(0, 0) / (r * c) as f64;
                let dx = Matrix::from_fn(r, c, |_, _| g);
                self.accumulate(a, &dx);
            }
            Op::SubIdentity(a) => {
                self.accumulate(a, &grad);
            }
            Op::RowMaxExcludingDiag { input, argmax } => {
                let n = argmax.len();
                let mut dx = Matrix::zeros(n, n);
                for (i, &j) in argmax.iter().enumerate() {
                    dx.add_at(i, j, grad.get(i, 0));
                }
                self.accumulate(input, &dx);
            }
            Op::ColMaxExcludingDiag { input, argmax } => {
                let n = argmax.len();
                let mut dx = Matrix::zeros(n, n);
                for (j, &i) in argmax.iter().enumerate() {
                    dx.add_at(i, j, grad.get(j, 0));
                }
                self.accumulate(input, &dx);
            }
            Op::ExtractDiag(a) => {
                let n = self.nodes[a.0].value.rows();
                let mut dx = Matrix::zeros(n, n);
                for i in 0..n {
                    dx.set(i, i, grad.get(i, 0));
                }
                self.accumulate(a, &dx);
            }
            Op::Gather { input, indices } => {
                let (r, c) = self.nodes[input.0].value.shape();
                let mut dx = Matrix::zeros(r, c);
                for (k, &(i, j)) in indices.iter().enumerate() {
                    dx.add_at(i, j, grad.get(k, 0));
                }
                self.accumulate(input, &dx);
            }
            Op::AddColVector { matrix, column } => {
                self.accumulate(matrix, &grad);
                let mut db = Matrix::zeros(grad.rows(), 1);
                for i in 0..grad.rows() {
                    let row_sum: f64 = (0..grad.cols()).map(|j| grad.get(i, j)).sum();
                    db.set(i, 0, row_sum);
                }
                self.accumulate(column, &db);
            }
            Op::ConcatCols(a, b) => {
                let (r, ac) = self.nodes[a.0].value.shape();
                let bc = self.nodes[b.0].value.cols();
                let da = Matrix::from_fn(r, ac, |i, j| grad.get(i, j));
                let db = Matrix::from_fn(r, bc, |i, j| grad.get(i, j + ac));
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
        }
    }

    fn accumulate(&mut self, id: NodeId, delta: &Matrix) {
        let grad = &mut self.nodes[id.0].grad;
        debug_assert_eq!(grad.shape(), delta.shape());
        for (g, d) in grad.data_mut().iter_mut().zip(delta.data().iter()) {
            *g += d;
        }
    }
}

/// Overflow-safe log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
