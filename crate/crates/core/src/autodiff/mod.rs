//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive as it is evaluated, so nodes are stored in
//! topological order by construction. [`Tape::backward`] walks the list in
//! reverse and accumulates adjoints; adjoints reaching a parameter leaf are
//! added into the owning [`ParamStore`].
//!
//! Vectors are represented as `1×n` row matrices throughout.

mod checkpoint;
mod params;

use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{matmul_into, tri_len, LinalgError, Matrix};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, NamedTensor};
pub use params::{glorot_uniform, Adam, AdamConfig, Param, ParamId, ParamStore};

/// Lower clamp for probabilities inside binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    DomainError { op: &'static str, detail: String },
    #[error("backward called on a non-scalar node of shape {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn mismatch(op: &'static str, a: &Matrix, b: &Matrix) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        detail: format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Fixed sparse row operator `P` (CSR); `aggregate` computes `P·X`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseRows {
    /// Builds the operator from per-row `(column, weight)` lists.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for &(c, w) in row {
                assert!(c < cols, "column {c} out of range {cols}");
                col_idx.push(c);
                weights.push(w);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            weights,
        }
    }

    /// Row-mean operator over the given neighbor lists; empty rows stay zero.
    pub fn mean_of(cols: usize, neighbors: &[Vec<usize>]) -> Self {
        let rows: Vec<Vec<(usize, f64)>> = neighbors
            .iter()
            .map(|nbrs| {
                let w = 1.0 / nbrs.len().max(1) as f64;
                nbrs.iter().map(|&c| (c, w)).collect()
            })
            .collect();
        Self::from_rows(cols, &rows)
    }

    pub fn empty(n: usize) -> Self {
        Self::from_rows(n, &vec![Vec::new(); n])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, x.cols());
        for r in 0..self.rows {
            let (ptr0, ptr1) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let out_row = out.row_mut(r);
            for k in ptr0..ptr1 {
                let w = self.weights[k];
                for (o, v) in out_row.iter_mut().zip(x.row(self.col_idx[k])) {
                    *o += w * v;
                }
            }
        }
        out
    }

    /// `Pᵀ·g`.
    fn apply_transpose(&self, g: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.cols, g.cols());
        for r in 0..self.rows {
            let g_row = g.row(r).to_vec();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let w = self.weights[k];
                for (o, v) in out.row_mut(self.col_idx[k]).iter_mut().zip(&g_row) {
                    *o += w * v;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Div {
        num: Var,
        den: Var,
        floor: f64,
    },
    MeanRows(Var),
    SumAll(Var),
    FrobeniusSq(Var),
    Bce {
        scores: Var,
        labels: Arc<[f64]>,
        mean: bool,
    },
    Aggregate(Var, Arc<SparseRows>),
    GatherRows(Var, Arc<[usize]>),
    ScatterLower(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recording of one forward evaluation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after a backward pass.
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Matrix>>,
}

impl Adjoints {
    /// `∂loss/∂var`, or `None` when the loss does not depend on `var`.
    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records a trainable leaf whose adjoint flows back into `store[id]`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Records `store[id]` as a constant leaf (frozen parameter).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(mismatch("matmul", va, vb));
        }
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        matmul_into(va, vb, &mut out);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op, va, vb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Hadamard(a, b)))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::ScalarMul(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scalar_mul(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Adds the `1×c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(mismatch("add_row", va, vr));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Column-wise concatenation `[a | b | ...]`.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows =
            parts
                .first()
                .map(|&p| self.value(p).rows())
                .ok_or(AutodiffError::ShapeMismatch {
                    op: "concat",
                    detail: "no inputs".into(),
                })?;
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(mismatch("concat", self.value(parts[0]), self.value(bad)));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("columns {start}..{} of {}", start + len, va.cols()),
            });
        }
        let out = Matrix::from_fn(va.rows(), len, |r, c| va[(r, start + c)]);
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Elementwise `num / max(den, floor)`.
    pub fn elementwise_div(&mut self, num: Var, den: Var, floor: f64) -> Result<Var> {
        self.same_shape("elementwise_div", num, den)?;
        let out = self
            .value(num)
            .zip_map(self.value(den), |x, y| x / y.max(floor));
        Ok(self.push(out, Op::Div { num, den, floor }))
    }

    /// Mean over rows, giving a `1×c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).column_means().to_row_matrix();
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::SumAll(a))
    }

    /// Squared Frobenius norm as a `1×1` node.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Matrix::scalar(s), Op::FrobeniusSq(a))
    }

    /// Binary cross-entropy of `scores` (any shape, entries in (0,1)) against
    /// `labels`, summed over entries (or averaged when `mean`). Scores are
    /// clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` before taking logs, so saturated
    /// scores of exactly 0 or 1 are accepted.
    pub fn bce(&mut self, scores: Var, labels: &[f64], mean: bool) -> Result<Var> {
        let vs = self.value(scores);
        if vs.len() != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce",
                detail: format!("{} scores vs {} labels", vs.len(), labels.len()),
            });
        }
        if let Some(bad) = vs.data().iter().find(|&&f| !(0.0..=1.0).contains(&f)) {
            return Err(AutodiffError::DomainError {
                op: "bce",
                detail: format!("score {bad} outside [0,1]"),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(AutodiffError::DomainError {
                op: "bce",
                detail: format!("label {bad} not in {{0,1}}"),
            });
        }
        let mut loss = 0.0;
        for (&f, &y) in vs.data().iter().zip(labels) {
            let f = f.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= (1.0 - y) * (1.0 - f).ln() + y * f.ln();
        }
        if mean {
            loss /= labels.len().max(1) as f64;
        }
        Ok(self.push(
            Matrix::scalar(loss),
            Op::Bce {
                scores,
                labels: labels.into(),
                mean,
            },
        ))
    }

    /// `P·a` for a fixed sparse operator.
    pub fn aggregate(&mut self, a: Var, op: Arc<SparseRows>) -> Result<Var> {
        let va = self.value(a);
        if op.cols != va.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "aggregate",
                detail: format!("operator {}x{} on {} rows", op.rows, op.cols, va.rows()),
            });
        }
        let out = op.apply(va);
        Ok(self.push(out, Op::Aggregate(a, op)))
    }

    /// Output row `k` is row `indices[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: Arc<[usize]>) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.rows()) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row {bad} of {}", va.rows()),
            });
        }
        let out = va.select_rows(&indices);
        Ok(self.push(out, Op::GatherRows(a, indices)))
    }

    /// Unflattens a `1×d(d+1)/2` row into a `d×d` lower-triangular matrix.
    pub fn scatter_lower(&mut self, a: Var, dim: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rows() != 1 || va.cols() != tri_len(dim) {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_lower",
                detail: format!("{}x{} for dim {dim}", va.rows(), va.cols()),
            });
        }
        let out = crate::linalg::unflatten_lower(va.data(), dim)?;
        Ok(self.push(out, Op::ScatterLower(a)))
    }

    /// Reverse pass from the scalar `loss`. Parameter adjoints are added to
    /// the gradients held in `store`; all node adjoints are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Adjoints> {
        let adj = self.adjoints(loss)?;
        for (node, grad) in self.nodes.iter().zip(&adj.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                store.accumulate_grad(*id, g)?;
            }
        }
        Ok(adj)
    }

    /// Reverse pass without touching any parameter store.
    pub fn adjoints(&self, loss: Var) -> Result<Adjoints> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape.0, shape.1));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Adjoints { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, delta: Matrix| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta).map_err(AutodiffError::from),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul_t(vb)?)?;
                acc(*b, va.t_matmul(g)?)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                acc(*a, g.hadamard(self.value(*b))?)?;
                acc(*b, g.hadamard(self.value(*a))?)?;
            }
            Op::ScalarMul(a, s) => acc(*a, g.scale(*s))?,
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::AddRow(a, row) => {
                acc(*a, g.clone())?;
                acc(
                    *row,
                    g.column_means().to_row_matrix().scale(g.rows() as f64),
                )?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    acc(
                        p,
                        Matrix::from_fn(g.rows(), cols, |r, c| g[(r, offset + c)]),
                    )?;
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let mut d = Matrix::zeros(va.rows(), va.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, d)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gi, s| gi * s * (1.0 - s)))?,
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gi, t| gi * (1.0 - t * t)))?,
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }),
            )?,
            Op::Div { num, den, floor } => {
                let (vn, vd) = (self.value(*num), self.value(*den));
                acc(*num, g.zip_map(vd, |gi, d| gi / d.max(*floor)))?;
                let mut dd = Matrix::zeros(vd.rows(), vd.cols());
                for ((o, (&gi, &n)), &d) in dd
                    .data_mut()
                    .iter_mut()
                    .zip(g.data().iter().zip(vn.data()))
                    .zip(vd.data())
                {
                    if d > *floor {
                        *o = -gi * n / (d * d);
                    }
                }
                acc(*den, dd)?;
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let inv = 1.0 / va.rows().max(1) as f64;
                acc(
                    *a,
                    Matrix::from_fn(va.rows(), va.cols(), |_, c| g[(0, c)] * inv),
                )?;
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Matrix::filled(r, c, g.item()))?;
            }
            Op::FrobeniusSq(a) => acc(*a, self.value(*a).scale(2.0 * g.item()))?,
            Op::Bce {
                scores,
                labels,
                mean,
            } => {
                let vs = self.value(*scores);
                let scale = if *mean {
                    g.item() / labels.len().max(1) as f64
                } else {
                    g.item()
                };
                let mut d = Matrix::zeros(vs.rows(), vs.cols());
                for ((o, &f), &y) in d.data_mut().iter_mut().zip(vs.data()).zip(labels.iter()) {
                    let fc = f.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    // Derivative is zero where the clamp is active.
                    let inside = f == fc;
                    if inside {
                        *o = scale * ((1.0 - y) / (1.0 - fc) - y / fc);
                    }
                }
                acc(*scores, d)?;
            }
            Op::Aggregate(a, op) => acc(*a, op.apply_transpose(g))?,
            Op::GatherRows(a, indices) => {
                let va = self.value(*a);
                let mut d = Matrix::zeros(va.rows(), va.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*a, d)?;
            }
            Op::ScatterLower(a) => {
                acc(*a, crate::linalg::flatten_lower(g).to_row_matrix())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sigmoid_value_and_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::scalar(0.0));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).item(), 0.5);
        let adj = tape.adjoints(s).unwrap();
        assert_eq!(adj.wrt(x).unwrap().item(), 0.25);
    }

    #[test]
    fn hadamard_gradient_is_other_operand() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[1.0, 2.0, 3.0]));
        let y = tape.constant(Matrix::row_vector(&[4.0, -5.0, 6.0]));
        let p = tape.hadamard(x, y).unwrap();
        let loss = tape.sum_all(p);
        let adj = tape.adjoints(loss).unwrap();
        assert_eq!(adj.wrt(x).unwrap(), tape.value(y));
        assert_eq!(adj.wrt(y).unwrap(), tape.value(x));
    }

    #[test]
    fn squared_norm_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let loss = tape.frobenius_sq(x);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).item(), 6.0);
        // A second pass accumulates.
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).item(), 12.0);
    }

    #[test]
    fn frobenius_of_difference_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let d = tape.sub(va, vb).unwrap();
        let loss = tape.frobenius_sq(d);
        let adj = tape.adjoints(loss).unwrap();
        let expected = a.sub(&b).unwrap().scale(2.0);
        assert!(adj.wrt(va).unwrap().max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3));
        let b = tape.constant(Matrix::zeros(2, 3));
        assert!(matches!(
            tape.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
        assert!(tape.add(a, b).is_ok());
        let c = tape.constant(Matrix::zeros(3, 2));
        assert!(tape.hadamard(a, c).is_err());
        assert!(matches!(
            tape.adjoints(a),
            Err(AutodiffError::NonScalarLoss(2, 3))
        ));
    }

    #[test]
    fn bce_domain_checks() {
        let mut tape = Tape::new();
        for bad in [-0.1, 1.5, f64::NAN] {
            let s = tape.constant(Matrix::row_vector(&[bad, 0.5]));
            assert!(matches!(
                tape.bce(s, &[0.0, 1.0], false),
                Err(AutodiffError::DomainError { .. })
            ));
        }
        let s = tape.constant(Matrix::row_vector(&[1.0, 0.0]));
        let l = tape.bce(s, &[0.0, 1.0], false).unwrap();
        assert!((tape.value(l).item() + 2.0 * BCE_CLAMP.ln()).abs() < 1e-9);
        let s = tape.constant(Matrix::row_vector(&[0.5; 4]));
        let l = tape.bce(s, &[0.0, 1.0, 0.0, 1.0], false).unwrap();
        assert!((tape.value(l).item() - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sparse_aggregate_matches_dense() {
        let p = SparseRows::mean_of(3, &[vec![1, 2], vec![], vec![0]]);
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let out = p.apply(&x);
        assert_eq!(out.row(0), &[4.0, 5.0]);
        assert_eq!(out.row(1), &[0.0, 0.0]);
        assert_eq!(out.row(2), &[1.0, 2.0]);
        assert_eq!(p.nnz(), 3);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_matrix(&mut rng, 4, 3));
        let x = rand_matrix(&mut rng, 5, 4);
        let build = |store: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(store, w);
            let h = tape.matmul(xv, wv).unwrap();
            let t = tape.tanh(h);
            let loss = tape.frobenius_sq(t);
            (tape, loss)
        };
        let (t1, l1) = build(&store);
        t1.backward(l1, &mut store).unwrap();
        let g1 = store.grad(w).clone();
        store.zero_grads();
        let (t2, l2) = build(&store);
        t2.backward(l2, &mut store).unwrap();
        assert_eq!(store.grad(w).data(), g1.data());
    }
}
