//! Reverse-mode automatic differentiation over matrix values.
//!
//! A [`Tape`] is a single-use computation graph: building a node runs its
//! forward computation immediately, so the graph construction is the forward
//! pass, and [`Tape::backward`] replays it in reverse for exact gradients.
//! There is no separate inference path; evaluation just builds a tape and
//! discards it, which keeps training and evaluation numerics bit-identical.
//!
//! Shape mismatches panic: every shape in the graph is fixed by the model
//! configuration, so a mismatch is a bug in the caller, not a data error.

use crate::linalg::Matrix;

/// Additive floor in `v / (||v|| + NORM_EPS)` row normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a @ b`.
    MatMul(NodeId, NodeId),
    /// `a + bias` with a 1-row bias broadcast over rows.
    AddRowBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    /// Column means: `RxC -> 1xC`.
    MeanRows(NodeId),
    /// Each row mapped to `v / (||v|| + NORM_EPS)`.
    L2NormalizeRows(NodeId),
    /// Per-row dot product of two same-shape matrices: `RxC -> Rx1`.
    RowDot(NodeId, NodeId),
    /// Horizontal concatenation of same-height matrices.
    ConcatCols(Vec<NodeId>),
    /// Columns `lo..hi`.
    SliceCols(NodeId, usize, usize),
    /// Vertical stack of 1-row matrices.
    StackRows(Vec<NodeId>),
    /// Per-row `log sum_j exp(x_ij)`: `RxC -> Rx1`.
    LogSumExpRows(NodeId),
    /// Per-row column gather with a fixed `R x k` index table.
    GatherCols(NodeId, Vec<usize>),
    /// `a - b` with a 1-column `b` broadcast over columns.
    SubColBroadcast(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// A differentiable input (a parameter).
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to `id`, if any
    /// reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Matrix, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(op, value, needs_grad)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows(), v.cols())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push_op(Op::MatMul(a, b), value, &[a, b])
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(bias), (1, cols), "bias width mismatch");
        let mut value = self.value(a).clone();
        for i in 0..rows {
            let b = self.nodes[bias.0].value.row(0).to_vec();
            for (d, s) in value.row_mut(i).iter_mut().zip(&b) {
                *d += s;
            }
        }
        self.push_op(Op::AddRowBias(a, bias), value, &[a, bias])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut value = self.value(a).clone();
        value.add_scaled(self.value(b), 1.0);
        self.push_op(Op::Add(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let mut value = self.value(a).clone();
        value.add_scaled(self.value(b), -1.0);
        self.push_op(Op::Sub(a, b), value, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let mut value = self.value(a).clone();
        for (d, s) in value
            .as_mut_slice()
            .iter_mut()
            .zip(self.nodes[b.0].value.as_slice())
        {
            *d *= s;
        }
        self.push_op(Op::Mul(a, b), value, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let mut value = self.value(a).clone();
        for d in value.as_mut_slice() {
            *d *= k;
        }
        self.push_op(Op::Scale(a, k), value, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for d in value.as_mut_slice() {
            *d = d.tanh();
        }
        self.push_op(Op::Tanh(a), value, &[a])
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert!(rows > 0, "mean_rows over empty matrix");
        let mut value = Matrix::zeros(1, cols);
        for i in 0..rows {
            for (d, s) in value.row_mut(0).iter_mut().zip(self.nodes[a.0].value.row(i)) {
                *d += s;
            }
        }
        for d in value.as_mut_slice() {
            *d /= rows as f64;
        }
        self.push_op(Op::MeanRows(a), value, &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let (rows, _) = self.shape(a);
        let mut value = self.value(a).clone();
        for i in 0..rows {
            let n = crate::linalg::norm(value.row(i));
            let s = 1.0 / (n + NORM_EPS);
            for d in value.row_mut(i) {
                *d *= s;
            }
        }
        self.push_op(Op::L2NormalizeRows(a), value, &[a])
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "row_dot shape mismatch");
        let (rows, _) = self.shape(a);
        let mut value = Matrix::zeros(rows, 1);
        for i in 0..rows {
            value.set(
                i,
                0,
                crate::linalg::dot(self.nodes[a.0].value.row(i), self.nodes[b.0].value.row(i)),
            );
        }
        self.push_op(Op::RowDot(a, b), value, &[a, b])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(r, rows, "concat_cols height mismatch");
            for i in 0..rows {
                let src = self.nodes[p.0].value.row(i).to_vec();
                value.row_mut(i)[at..at + c].copy_from_slice(&src);
            }
            at += c;
        }
        self.push_op(Op::ConcatCols(parts.to_vec()), value, parts)
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert!(lo < hi && hi <= cols, "slice {lo}..{hi} of {cols} columns");
        let mut value = Matrix::zeros(rows, hi - lo);
        for i in 0..rows {
            let src = self.nodes[a.0].value.row(i)[lo..hi].to_vec();
            value.row_mut(i).copy_from_slice(&src);
        }
        self.push_op(Op::SliceCols(a, lo, hi), value, &[a])
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack_rows of nothing");
        let cols = self.shape(parts[0]).1;
        let mut value = Matrix::zeros(parts.len(), cols);
        for (i, &p) in parts.iter().enumerate() {
            assert_eq!(self.shape(p), (1, cols), "stack_rows expects 1-row parts");
            let src = self.nodes[p.0].value.row(0).to_vec();
            value.row_mut(i).copy_from_slice(&src);
        }
        self.push_op(Op::StackRows(parts.to_vec()), value, parts)
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert!(cols > 0, "log_sum_exp over empty rows");
        let mut value = Matrix::zeros(rows, 1);
        for i in 0..rows {
            let row = self.nodes[a.0].value.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            value.set(i, 0, m + s.ln());
        }
        self.push_op(Op::LogSumExpRows(a), value, &[a])
    }

    /// `out[i][j] = a[i][indices[i*k + j]]`; `indices.len()` must be a
    /// multiple of the row count of `a`.
    pub fn gather_cols(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let (rows, cols) = self.shape(a);
        assert!(
            rows > 0 && indices.len() % rows == 0,
            "gather index table does not tile {rows} rows"
        );
        let k = indices.len() / rows;
        let mut value = Matrix::zeros(rows, k);
        for i in 0..rows {
            for j in 0..k {
                let idx = indices[i * k + j];
                assert!(idx < cols, "gather index {idx} out of {cols} columns");
                value.set(i, j, self.nodes[a.0].value.get(i, idx));
            }
        }
        self.push_op(Op::GatherCols(a, indices), value, &[a])
    }

    pub fn sub_col_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, _) = self.shape(a);
        assert_eq!(self.shape(b), (rows, 1), "broadcast column shape mismatch");
        let mut value = self.value(a).clone();
        for i in 0..rows {
            let s = self.nodes[b.0].value.get(i, 0);
            for d in value.row_mut(i) {
                *d -= s;
            }
        }
        self.push_op(Op::SubColBroadcast(a, b), value, &[a, b])
    }

    /// Accumulate gradients of a scalar node into every reachable input that
    /// needs them. Resets gradients from any earlier call.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.shape(loss), (1, 1), "backward target must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].clone() else {
                continue;
            };
            match self.nodes[id].op.clone() {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = g.matmul(&self.nodes[b.0].value.transpose());
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = self.nodes[a.0].value.transpose().matmul(&g);
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::AddRowBias(a, bias) => {
                    accumulate(&mut grads[a.0], &g);
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, s) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads[bias.0], &db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate_scaled(&mut grads[b.0], &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (d, s) in da
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[b.0].value.as_slice())
                    {
                        *d *= s;
                    }
                    accumulate(&mut grads[a.0], &da);
                    let mut db = g.clone();
                    for (d, s) in db
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[a.0].value.as_slice())
                    {
                        *d *= s;
                    }
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Scale(a, k) => {
                    accumulate_scaled(&mut grads[a.0], &g, k);
                }
                Op::Tanh(a) => {
                    let mut da = g.clone();
                    for (d, y) in da
                        .as_mut_slice()
                        .iter_mut()
                        .zip(self.nodes[id].value.as_slice())
                    {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[a.0].value.rows();
                    let mut da = Matrix::zeros(rows, g.cols());
                    for i in 0..rows {
                        for (d, s) in da.row_mut(i).iter_mut().zip(g.row(0)) {
                            *d = s / rows as f64;
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::L2NormalizeRows(a) => {
                    let v = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(v.rows(), v.cols());
                    for i in 0..v.rows() {
                        let row = v.row(i);
                        let n = crate::linalg::norm(row);
                        let s = 1.0 / (n + NORM_EPS);
                        let vg = crate::linalg::dot(row, g.row(i));
                        let shrink = if n > 0.0 {
                            vg / (n * (n + NORM_EPS) * (n + NORM_EPS))
                        } else {
                            0.0
                        };
                        for ((d, &gi), &vi) in
                            da.row_mut(i).iter_mut().zip(g.row(i)).zip(row)
                        {
                            *d = gi * s - vi * shrink;
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::RowDot(a, b) => {
                    for (x, y) in [(a, b), (b, a)] {
                        if !self.nodes[x.0].needs_grad {
                            continue;
                        }
                        let other = &self.nodes[y.0].value;
                        let mut dx = other.clone();
                        for i in 0..dx.rows() {
                            let s = g.get(i, 0);
                            for d in dx.row_mut(i) {
                                *d *= s;
                            }
                        }
                        accumulate(&mut grads[x.0], &dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut dp = Matrix::zeros(rows, cols);
                        for i in 0..rows {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[at..at + cols]);
                        }
                        accumulate(&mut grads[p.0], &dp);
                        at += cols;
                    }
                }
                Op::SliceCols(a, lo, _hi) => {
                    let (rows, cols) = self.shape(a);
                    let mut da = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        da.row_mut(i)[lo..lo + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::StackRows(parts) => {
                    for (i, p) in parts.into_iter().enumerate() {
                        let dp = Matrix::row_vector(g.row(i).to_vec());
                        accumulate(&mut grads[p.0], &dp);
                    }
                }
                Op::LogSumExpRows(a) => {
                    let v = &self.nodes[a.0].value;
                    let mut da = Matrix::zeros(v.rows(), v.cols());
                    for i in 0..v.rows() {
                        let row = v.row(i);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|x| (x - m).exp()).sum();
                        let gi = g.get(i, 0);
                        for (d, &x) in da.row_mut(i).iter_mut().zip(row) {
                            *d = gi * (x - m).exp() / denom;
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::GatherCols(a, indices) => {
                    let (rows, cols) = self.shape(a);
                    let k = indices.len() / rows;
                    let mut da = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        for j in 0..k {
                            let idx = indices[i * k + j];
                            da.set(i, idx, da.get(i, idx) + g.get(i, j));
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::SubColBroadcast(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    let mut db = Matrix::zeros(g.rows(), 1);
                    for i in 0..g.rows() {
                        db.set(i, 0, -g.row(i).iter().sum::<f64>());
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
        }
        self.grads = grads;
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn accumulate(slot: &mut Option<Matrix>, contribution: &Matrix) {
    accumulate_scaled(slot, contribution, 1.0);
}

fn accumulate_scaled(slot: &mut Option<Matrix>, contribution: &Matrix, scale: f64) {
    match slot {
        Some(g) => g.add_scaled(contribution, scale),
        None => {
            let mut g = Matrix::zeros(contribution.rows(), contribution.cols());
            g.add_scaled(contribution, scale);
            *slot = Some(g);
        }
    }
}
