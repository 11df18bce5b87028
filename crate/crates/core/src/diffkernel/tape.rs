//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in execution order. [`Tape::backward`]
//! walks the record in exact reverse order and accumulates gradients
//! additively, so a value consumed by several operations receives the sum of
//! all its contributions.
//!
//! Besides the dense operations, the tape carries a handful of sparse
//! "segment" operations over CSR layouts (per-row softmax, per-row mean,
//! weighted neighbor aggregation). Masked-out entries of a sparse layout are
//! never materialized, so they can neither receive nor leak gradient.

use std::sync::Arc;

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Guard added to cosine denominators; zero-norm rows give similarity 0.
pub const COSINE_EPS: f64 = 1e-12;
/// Probability clamp used by binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout of a sparse segment structure: row `i` owns entries
/// `offsets[i]..offsets[i + 1]`.
#[derive(Debug, Clone)]
pub struct Segments {
    pub offsets: Arc<[usize]>,
    /// Column (neighbor) index of each entry.
    pub cols: Arc<[usize]>,
}

impl Segments {
    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_entries(&self) -> usize {
        self.cols.len()
    }

    fn range(&self, row: usize) -> std::ops::Range<usize> {
        self.offsets[row]..self.offsets[row + 1]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    ConcatCols(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Mul(Var, Var),
    RowMean(Var),
    Sum(Var),
    Neg(Var),
    ScalarMul(Var, f64),
    Dropout(Var, Vec<f64>),
    MaskedRowSoftmax(Var, Vec<bool>),
    CosinePairs {
        a: Var,
        b: Var,
        left: Arc<[usize]>,
        right: Arc<[usize]>,
    },
    PairDot {
        a: Var,
        b: Var,
        left: Arc<[usize]>,
        right: Arc<[usize]>,
    },
    SegmentSoftmax(Var, Segments),
    SegmentMean(Var, Segments),
    SymMin(Var, Arc<[usize]>),
    SpMM {
        weights: Var,
        h: Var,
        segments: Segments,
    },
    WeightedSum(Var, Arc<[f64]>),
    Bce(Var, Arc<[f64]>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; all zeros when `var` is not
    /// on a path to the loss.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var) -> Matrix {
        let (r, c) = self.shapes[var.0];
        self.grads[var.0].take().unwrap_or_else(|| Matrix::zeros(r, c))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    /// Records a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a value that gradients are requested for.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn column_len(&self, op: &'static str, v: Var, len: usize) -> Result<()> {
        if self.shape(v) != (len, 1) {
            return Err(Error::shape(
                op,
                format!("expected a {len}x1 column, got {:?}", self.shape(v)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        self.push("matmul_nt", value, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1 × cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if self.shape(bias) != (1, cols) {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for {rows}x{cols}", self.shape(bias)),
            ));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..rows {
            for (x, y) in value.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push("add_row", value, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::shape("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        let value = Matrix::from_vec(ra, ca + cb, data)?;
        self.push("concat_cols", value, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("elementwise_mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Mean of each row, as an `rows × 1` column.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.cols() == 0 {
            return Err(Error::shape("row_mean", "zero columns"));
        }
        let value = Matrix::column(
            (0..m.rows())
                .map(|r| m.row(r).iter().sum::<f64>() / m.cols() as f64)
                .collect(),
        );
        self.push("row_mean", value, Op::RowMean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| -x);
        self.push("negate", value, Op::Neg(a), &[a])
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s);
        self.push("scalar_mul", value, Op::ScalarMul(a, s), &[a])
    }

    /// Inverted dropout with a precomputed per-entry scale (`0` or `1/(1-rate)`).
    pub fn dropout_with_scale(&mut self, a: Var, scale: Vec<f64>) -> Result<Var> {
        if scale.len() != self.value(a).len() {
            return Err(Error::shape("dropout", "mask length differs from input"));
        }
        let m = self.value(a);
        let data = m.as_slice().iter().zip(&scale).map(|(x, s)| x * s).collect();
        let value = Matrix::from_vec(m.rows(), m.cols(), data)?;
        self.push("dropout", value, Op::Dropout(a, scale), &[a])
    }

    /// Row-wise softmax restricted to entries where `mask` is true. Masked-out
    /// entries are exactly zero; a row with no allowed entry is all zeros.
    pub fn masked_row_softmax(&mut self, scores: Var, mask: &[bool]) -> Result<Var> {
        let s = self.value(scores);
        if mask.len() != s.len() {
            return Err(Error::shape(
                "masked_row_softmax",
                format!("mask of {} for {:?}", mask.len(), s.shape()),
            ));
        }
        let (rows, cols) = s.shape();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row_mask = &mask[r * cols..(r + 1) * cols];
            softmax_into(s.row(r), row_mask, value.row_mut(r));
        }
        self.push(
            "masked_row_softmax",
            value,
            Op::MaskedRowSoftmax(scores, mask.to_vec()),
            &[scores],
        )
    }

    /// Row-wise cosine similarity of two equally shaped matrices (`rows × 1`).
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let idx: Arc<[usize]> = (0..self.shape(a).0).collect();
        self.cosine_pairs(a, b, idx.clone(), idx)
    }

    /// `out[e] = cos(a[left[e]], b[right[e]])`, as an `m × 1` column.
    pub fn cosine_pairs(
        &mut self,
        a: Var,
        b: Var,
        left: Arc<[usize]>,
        right: Arc<[usize]>,
    ) -> Result<Var> {
        self.check_pairs("cosine_pairs", a, b, &left, &right)?;
        let (ma, mb) = (self.value(a), self.value(b));
        let value = Matrix::column(
            left.iter()
                .zip(right.iter())
                .map(|(&i, &j)| cosine(ma.row(i), mb.row(j)))
                .collect(),
        );
        self.push(
            "cosine_pairs",
            value,
            Op::CosinePairs { a, b, left, right },
            &[a, b],
        )
    }

    /// `out[e] = ⟨a[left[e]], b[right[e]]⟩`, as an `m × 1` column.
    pub fn pair_dot(
        &mut self,
        a: Var,
        b: Var,
        left: Arc<[usize]>,
        right: Arc<[usize]>,
    ) -> Result<Var> {
        self.check_pairs("pair_dot", a, b, &left, &right)?;
        let (ma, mb) = (self.value(a), self.value(b));
        let value = Matrix::column(
            left.iter()
                .zip(right.iter())
                .map(|(&i, &j)| dot(ma.row(i), mb.row(j)))
                .collect(),
        );
        self.push("pair_dot", value, Op::PairDot { a, b, left, right }, &[a, b])
    }

    fn check_pairs(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        left: &[usize],
        right: &[usize],
    ) -> Result<()> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb || left.len() != right.len() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", (ra, ca), (rb, cb))));
        }
        if left.iter().any(|&i| i >= ra) || right.iter().any(|&j| j >= rb) {
            return Err(Error::shape(op, "row index out of range"));
        }
        Ok(())
    }

    /// Softmax within each segment of an `entries × 1` column.
    pub fn segment_softmax(&mut self, values: Var, segments: &Segments) -> Result<Var> {
        self.column_len("segment_softmax", values, segments.num_entries())?;
        let v = self.value(values).as_slice();
        let mut out = vec![0.0; v.len()];
        for row in 0..segments.num_rows() {
            let range = segments.range(row);
            let all = vec![true; range.len()];
            softmax_into(&v[range.clone()], &all, &mut out[range]);
        }
        self.push(
            "segment_softmax",
            Matrix::column(out),
            Op::SegmentSoftmax(values, segments.clone()),
            &[values],
        )
    }

    /// Mean within each segment (`rows × 1`); empty segments give 0.
    pub fn segment_mean(&mut self, values: Var, segments: &Segments) -> Result<Var> {
        self.column_len("segment_mean", values, segments.num_entries())?;
        let v = self.value(values).as_slice();
        let out = (0..segments.num_rows())
            .map(|row| {
                let range = segments.range(row);
                if range.is_empty() {
                    0.0
                } else {
                    let n = range.len() as f64;
                    v[range].iter().sum::<f64>() / n
                }
            })
            .collect();
        self.push(
            "segment_mean",
            Matrix::column(out),
            Op::SegmentMean(values, segments.clone()),
            &[values],
        )
    }

    /// `out[e] = min(v[e], v[partner[e]])` for an `entries × 1` column.
    pub fn sym_min(&mut self, values: Var, partner: Arc<[usize]>) -> Result<Var> {
        self.column_len("sym_min", values, partner.len())?;
        let v = self.value(values).as_slice();
        if partner.iter().any(|&p| p >= v.len()) {
            return Err(Error::shape("sym_min", "partner index out of range"));
        }
        let out = (0..v.len()).map(|e| v[e].min(v[partner[e]])).collect();
        self.push(
            "sym_min",
            Matrix::column(out),
            Op::SymMin(values, partner),
            &[values],
        )
    }

    /// Weighted neighbor aggregation: `out[r] = Σ_{e ∈ row r} w[e] · h[cols[e]]`.
    pub fn spmm(&mut self, weights: Var, segments: &Segments, h: Var) -> Result<Var> {
        self.column_len("spmm", weights, segments.num_entries())?;
        let hm = self.value(h);
        if segments.cols.iter().any(|&c| c >= hm.rows()) {
            return Err(Error::shape("spmm", "column index out of range"));
        }
        let w = self.value(weights).as_slice();
        let mut out = Matrix::zeros(segments.num_rows(), hm.cols());
        for row in 0..segments.num_rows() {
            let out_row = out.row_mut(row);
            for e in segments.range(row) {
                let we = w[e];
                for (o, x) in out_row.iter_mut().zip(hm.row(segments.cols[e])) {
                    *o += we * x;
                }
            }
        }
        self.push(
            "spmm",
            out,
            Op::SpMM {
                weights,
                h,
                segments: segments.clone(),
            },
            &[weights, h],
        )
    }

    /// `Σ coeffs[i] · values[i]` over an `m × 1` column.
    pub fn weighted_sum(&mut self, values: Var, coeffs: Arc<[f64]>) -> Result<Var> {
        self.column_len("weighted_sum", values, coeffs.len())?;
        let v = self.value(values).as_slice();
        let value = Matrix::scalar(v.iter().zip(coeffs.iter()).map(|(a, b)| a * b).sum());
        self.push("weighted_sum", value, Op::WeightedSum(values, coeffs), &[values])
    }

    /// Mean binary cross-entropy of an `n × 1` probability column against
    /// 0/1 targets, with probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: Arc<[f64]>) -> Result<Var> {
        self.column_len("binary_cross_entropy", probs, targets.len())?;
        if targets.is_empty() {
            return Err(Error::shape("binary_cross_entropy", "no targets"));
        }
        let p = self.value(probs).as_slice();
        let total: f64 = p
            .iter()
            .zip(targets.iter())
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let value = Matrix::scalar(total / targets.len() as f64);
        self.push("binary_cross_entropy", value, Op::Bce(probs, targets), &[probs])
    }

    /// Runs the reverse pass from the scalar `loss`. A tape can be
    /// differentiated once; record a fresh forward pass to differentiate again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; re-run the forward pass".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        // Only leaves keep their gradients.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, contrib: Matrix| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ma, mb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, g.matmul_nt(mb).expect("shape"));
                }
                if self.needs(*b) {
                    acc(*b, ma.matmul_tn(g).expect("shape"));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = A Bᵀ; dA = G B; dB = Gᵀ A
                let (ma, mb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, g.matmul(mb).expect("shape"));
                }
                if self.needs(*b) {
                    acc(*b, g.matmul_tn(ma).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (s, x) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                acc(*bias, gb);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                let mut ga = Matrix::zeros(g.rows(), ca);
                let mut gb = Matrix::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                acc(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y)));
            }
            Op::Mul(a, b) => {
                let (ma, mb) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(mb, |gv, y| gv * y));
                acc(*b, g.zip_map(ma, |gv, x| gv * x));
            }
            Op::RowMean(a) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let v = g.get(r, 0) / cols as f64;
                    ga.row_mut(r).fill(v);
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                acc(*a, Matrix::filled(rows, cols, g.item()));
            }
            Op::Neg(a) => acc(*a, g.scale(-1.0)),
            Op::ScalarMul(a, s) => acc(*a, g.scale(*s)),
            Op::Dropout(a, scale) => {
                let data = g.as_slice().iter().zip(scale).map(|(x, s)| x * s).collect();
                acc(*a, Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"));
            }
            Op::MaskedRowSoftmax(a, mask) => {
                let (rows, cols) = out.shape();
                let mut ga = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    softmax_backward(
                        out.row(r),
                        g.row(r),
                        &mask[r * cols..(r + 1) * cols],
                        ga.row_mut(r),
                    );
                }
                acc(*a, ga);
            }
            Op::CosinePairs { a, b, left, right } => {
                let (ma, mb) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(ma.rows(), ma.cols());
                let mut gb = Matrix::zeros(mb.rows(), mb.cols());
                for (e, (&i, &j)) in left.iter().zip(right.iter()).enumerate() {
                    let ge = g.get(e, 0);
                    if ge == 0.0 {
                        continue;
                    }
                    let (x, y) = (ma.row(i), mb.row(j));
                    let (nx, ny) = (norm(x), norm(y));
                    let denom = nx * ny;
                    if denom >= COSINE_EPS {
                        let c = out.get(e, 0);
                        let gx = ga.row_mut(i);
                        for k in 0..x.len() {
                            gx[k] += ge * (y[k] / denom - c * x[k] / (nx * nx));
                        }
                        let gy = gb.row_mut(j);
                        for k in 0..y.len() {
                            gy[k] += ge * (x[k] / denom - c * y[k] / (ny * ny));
                        }
                    } else {
                        let gx = ga.row_mut(i);
                        for k in 0..x.len() {
                            gx[k] += ge * y[k] / COSINE_EPS;
                        }
                        let gy = gb.row_mut(j);
                        for k in 0..y.len() {
                            gy[k] += ge * x[k] / COSINE_EPS;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::PairDot { a, b, left, right } => {
                let (ma, mb) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(ma.rows(), ma.cols());
                let mut gb = Matrix::zeros(mb.rows(), mb.cols());
                for (e, (&i, &j)) in left.iter().zip(right.iter()).enumerate() {
                    let ge = g.get(e, 0);
                    if ge == 0.0 {
                        continue;
                    }
                    for (o, y) in ga.row_mut(i).iter_mut().zip(mb.row(j)) {
                        *o += ge * y;
                    }
                    for (o, x) in gb.row_mut(j).iter_mut().zip(ma.row(i)) {
                        *o += ge * x;
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::SegmentSoftmax(a, segments) => {
                let mut ga = vec![0.0; segments.num_entries()];
                for row in 0..segments.num_rows() {
                    let range = segments.range(row);
                    let all = vec![true; range.len()];
                    softmax_backward(
                        &out.as_slice()[range.clone()],
                        &g.as_slice()[range.clone()],
                        &all,
                        &mut ga[range],
                    );
                }
                acc(*a, Matrix::column(ga));
            }
            Op::SegmentMean(a, segments) => {
                let mut ga = vec![0.0; segments.num_entries()];
                for row in 0..segments.num_rows() {
                    let range = segments.range(row);
                    if range.is_empty() {
                        continue;
                    }
                    let v = g.get(row, 0) / range.len() as f64;
                    ga[range].fill(v);
                }
                acc(*a, Matrix::column(ga));
            }
            Op::SymMin(a, partner) => {
                let v = self.value(*a).as_slice();
                let mut ga = vec![0.0; v.len()];
                for e in 0..v.len() {
                    // Ties route to the entry itself.
                    let src = if v[e] <= v[partner[e]] { e } else { partner[e] };
                    ga[src] += g.get(e, 0);
                }
                acc(*a, Matrix::column(ga));
            }
            Op::SpMM {
                weights,
                h,
                segments,
            } => {
                let w = self.value(*weights).as_slice();
                let hm = self.value(*h);
                if self.needs(*weights) {
                    let mut gw = vec![0.0; w.len()];
                    for row in 0..segments.num_rows() {
                        for e in segments.range(row) {
                            gw[e] = dot(g.row(row), hm.row(segments.cols[e]));
                        }
                    }
                    acc(*weights, Matrix::column(gw));
                }
                if self.needs(*h) {
                    let mut gh = Matrix::zeros(hm.rows(), hm.cols());
                    for row in 0..segments.num_rows() {
                        let g_row = g.row(row);
                        for e in segments.range(row) {
                            let we = w[e];
                            for (o, x) in gh.row_mut(segments.cols[e]).iter_mut().zip(g_row) {
                                *o += we * x;
                            }
                        }
                    }
                    acc(*h, gh);
                }
            }
            Op::WeightedSum(a, coeffs) => {
                let s = g.item();
                acc(*a, Matrix::column(coeffs.iter().map(|c| c * s).collect()));
            }
            Op::Bce(a, targets) => {
                let p = self.value(*a).as_slice();
                let n = targets.len() as f64;
                let s = g.item();
                let ga = p
                    .iter()
                    .zip(targets.iter())
                    .map(|(&p, &y)| {
                        if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            s * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                acc(*a, Matrix::column(ga));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity with the denominator guarded at [`COSINE_EPS`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    dot(a, b) / denom.max(COSINE_EPS)
}

fn softmax_into(scores: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if m { (s - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], mask: &[bool], out: &mut [f64]) {
    let inner: f64 = y
        .iter()
        .zip(g)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((y, g), _)| y * g)
        .sum();
    for (((o, &yv), &gv), &m) in out.iter_mut().zip(y).zip(g).zip(mask) {
        *o = if m { yv * (gv - inner) } else { 0.0 };
    }
}
