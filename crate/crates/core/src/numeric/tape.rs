//! Reverse-mode tape. A tape borrows the parameter store, records each op
//! with its output value, and replays the ops backwards into [`Gradients`].

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::params::{Gradients, ParamId, ParamStore};
use super::{Tensor, TensorError};
use crate::math;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RepeatRows(Var),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Reshape(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    /// `ratio[i][j] = exp(l_ij - m_i) / S_i`, or 0 on fallback rows.
    Softmax { logits: Var, weights: Option<Var>, ratio: Tensor, fallback: Vec<bool> },
    LabelBias(Var, Vec<u32>),
    LabelMass(Var, Vec<u32>),
    Bce(Var, Vec<f64>),
    SumAll(Var),
}

struct Node {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    /// Some parameter is upstream; backward skips nodes without one.
    grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.shape(), right: b.shape() }
}

fn for_each_bit(mut set: u32, mut f: impl FnMut(usize)) {
    while set != 0 {
        f(set.trailing_zeros() as usize);
        set &= set - 1;
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("only parameter nodes omit their value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            &Op::MatMul(a, b) | &Op::MatMulNt(a, b) | &Op::Add(a, b) | &Op::AddRow(a, b) | &Op::Sub(a, b) | &Op::Mul(a, b) => {
                self.needs(a) || self.needs(b)
            }
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().any(|&p| self.needs(p)),
            &Op::Affine(a, _)
            | &Op::SliceCols(a, _)
            | &Op::SliceRows(a, _)
            | &Op::RepeatRows(a)
            | &Op::GatherRows(a, _)
            | &Op::MeanRows(a)
            | &Op::Reshape(a)
            | &Op::LeakyRelu(a, _)
            | &Op::Sigmoid(a)
            | &Op::Tanh(a)
            | &Op::LabelBias(a, _)
            | &Op::LabelMass(a, _)
            | &Op::Bce(a, _)
            | &Op::SumAll(a) => self.needs(a),
            Op::Softmax { logits, weights, .. } => self.needs(*logits) || weights.is_some_and(|w| self.needs(w)),
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let grad = self.op_needs_grad(&op);
        self.nodes.push(Node { value: Some(value), op, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; receives no gradient outside the tape.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var, TensorError> {
        self.push("leaf", t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id), grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant rows `indices` of `table`, without recording the table.
    pub fn constant_rows(&mut self, table: &Tensor, indices: &[usize]) -> Result<Var, TensorError> {
        let c = table.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= table.rows() {
                return Err(TensorError::Invalid { op: "constant_rows", message: "row index out of range" });
            }
            data.extend_from_slice(table.row(i));
        }
        self.leaf(Tensor::new(indices.len(), c, data)?)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm_nn(ta.data(), tb.data(), out.data_mut(), ta.rows(), ta.cols(), tb.cols());
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`; with `b` stored `out × in` this is a linear map.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        gemm_nt(ta.data(), tb.data(), out.data_mut(), ta.rows(), ta.cols(), tb.rows());
        self.push("matmul_nt", out, Op::MatMulNt(a, b))
    }

    fn zip_with(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.rows(), ta.cols(), ta.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds the `1 × m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || ta.cols() != tb.cols() {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut out = ta.clone();
        let m = tb.cols();
        for row in out.data_mut().chunks_exact_mut(m.max(1)) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        self.push("add_row", out, Op::AddRow(a, b))
    }

    /// `s · a + t`.
    pub fn affine(&mut self, a: Var, s: f64, t: f64) -> Result<Var, TensorError> {
        let out = self.map(a, |x| s * x + t);
        self.push("affine", out, Op::Affine(a, s))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.affine(a, s, 0.0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Invalid { op: "concat_cols", message: "nothing to concatenate" })?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(mismatch("concat_cols", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Invalid { op: "concat_rows", message: "nothing to concatenate" })?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(first), t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(TensorError::Invalid { op: "slice_cols", message: "range exceeds width" });
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let out = Tensor::new(ta.rows(), len, data)?;
        self.push("slice_cols", out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if start + len > ta.rows() {
            return Err(TensorError::Invalid { op: "slice_rows", message: "range exceeds height" });
        }
        let c = ta.cols();
        let out = Tensor::new(len, c, ta.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows(a, start))
    }

    /// Stacks `n` copies of a single-row tensor.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rows() != 1 {
            return Err(TensorError::Invalid { op: "repeat_rows", message: "input must be a single row" });
        }
        let out = Tensor::new(n, ta.cols(), ta.data().repeat(n))?;
        self.push("repeat_rows", out, Op::RepeatRows(a))
    }

    /// Embedding lookup.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= t.rows() {
                return Err(TensorError::Invalid { op: "gather_rows", message: "row index out of range" });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(indices.len(), c, data)?;
        self.push("gather_rows", out, Op::GatherRows(table, indices.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rows() == 0 {
            return Err(TensorError::Invalid { op: "mean_rows", message: "no rows" });
        }
        let mut out = Tensor::zeros(1, ta.cols());
        for r in 0..ta.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        out.scale_in_place(1.0 / ta.rows() as f64);
        self.push("mean_rows", out, Op::MeanRows(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.len() != rows * cols {
            return Err(TensorError::ShapeMismatch { op: "reshape", left: ta.shape(), right: (rows, cols) });
        }
        let out = Tensor::new(rows, cols, ta.data().to_vec())?;
        self.push("reshape", out, Op::Reshape(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        let out = self.map(a, |x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", out, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.map(a, math::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.map(a, math::tanh);
        self.push("tanh", out, Op::Tanh(a))
    }

    /// Row softmax over entries where `mask` is true; masked entries are 0.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var, TensorError> {
        self.softmax_impl("masked_softmax", logits, None, mask)
    }

    /// `out_ij = w_ij·exp(l_ij) / Σ_k w_ik·exp(l_ik)` over the mask, with
    /// `w ≥ 0`. Rows whose weights are all zero become uniform over the mask
    /// and pass no gradient.
    pub fn weighted_softmax(&mut self, logits: Var, weights: Var, mask: &[bool]) -> Result<Var, TensorError> {
        self.softmax_impl("weighted_softmax", logits, Some(weights), mask)
    }

    fn softmax_impl(
        &mut self,
        name: &'static str,
        logits: Var,
        weights: Option<Var>,
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let (n, m) = tl.shape();
        if mask.len() != n * m {
            return Err(TensorError::ShapeMismatch { op: name, left: (n, m), right: (mask.len(), 1) });
        }
        let tw = match weights {
            Some(w) => {
                let tw = self.value(w);
                if tw.shape() != (n, m) {
                    return Err(mismatch(name, tl, tw));
                }
                if tw.data().iter().any(|&x| x < 0.0) {
                    return Err(TensorError::Invalid { op: name, message: "weights must be non-negative" });
                }
                Some(tw)
            }
            None => None,
        };
        let mut out = Tensor::zeros(n, m);
        let mut ratio = Tensor::zeros(n, m);
        let mut fallback = vec![false; n];
        for i in 0..n {
            let row_mask = &mask[i * m..(i + 1) * m];
            let active = row_mask.iter().filter(|&&b| b).count();
            if active == 0 {
                return Err(TensorError::EmptyRow { op: name, row: i });
            }
            let lrow = tl.row(i);
            // Max over the cells that can carry mass, so a zero-weight cell
            // with a large logit cannot underflow the others.
            let live = |j: usize| row_mask[j] && tw.is_none_or(|t| t.get(i, j) > 0.0);
            let mx = (0..m).filter(|&j| live(j)).map(|j| lrow[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..m {
                if live(j) {
                    let e = math::exp(lrow[j] - mx);
                    let w = tw.map_or(1.0, |t| t.get(i, j));
                    ratio.set(i, j, e);
                    out.set(i, j, w * e);
                    s += w * e;
                }
            }
            if s > 0.0 {
                for j in 0..m {
                    out.set(i, j, out.get(i, j) / s);
                    if live(j) {
                        ratio.set(i, j, ratio.get(i, j) / s);
                    } else if row_mask[j] {
                        // Sensitivity to a zero weight; saturates instead of
                        // overflowing when that cell's logit dominates.
                        let r = math::exp(lrow[j] - mx) / s;
                        ratio.set(i, j, if r.is_finite() { r } else { f64::MAX });
                    }
                }
            } else {
                fallback[i] = true;
                for j in 0..m {
                    out.set(i, j, if row_mask[j] { 1.0 / active as f64 } else { 0.0 });
                    ratio.set(i, j, 0.0);
                }
            }
        }
        self.push(name, out, Op::Softmax { logits, weights, ratio, fallback })
    }

    /// `out_ij = Σ_{k ∈ sets_ij} c_k` for a `1 × K` table `c`; `sets` holds
    /// one label bitmask per cell.
    pub fn label_bias(&mut self, table: Var, sets: &[u32], n: usize) -> Result<Var, TensorError> {
        let tc = self.value(table);
        if tc.rows() != 1 || sets.len() != n * n {
            return Err(TensorError::Invalid { op: "label_bias", message: "table must be 1×K and sets N×N" });
        }
        if sets.iter().any(|&s| s >> tc.cols() != 0) {
            return Err(TensorError::Invalid { op: "label_bias", message: "label outside the table" });
        }
        let mut out = Tensor::zeros(n, n);
        for (o, &s) in out.data_mut().iter_mut().zip(sets) {
            for_each_bit(s, |k| *o += tc.data()[k]);
        }
        self.push("label_bias", out, Op::LabelBias(table, sets.to_vec()))
    }

    /// `out_ik = Σ_j a_ij · [k ∈ sets_ij]`, an `N × K` matrix.
    pub fn label_mass(&mut self, a: Var, sets: &[u32], k: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (n, m) = ta.shape();
        if sets.len() != n * m || sets.iter().any(|&s| s >> k != 0) {
            return Err(TensorError::Invalid { op: "label_mass", message: "label sets do not fit" });
        }
        let mut out = Tensor::zeros(n, k);
        for i in 0..n {
            for j in 0..m {
                let a_ij = ta.get(i, j);
                for_each_bit(sets[i * m + j], |l| out.data_mut()[i * k + l] += a_ij);
            }
        }
        self.push("label_mass", out, Op::LabelMass(a, sets.to_vec()))
    }

    /// Mean over classes of binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        if tl.len() != target.len() || target.is_empty() {
            return Err(TensorError::ShapeMismatch { op: "bce_with_logits", left: tl.shape(), right: (1, target.len()) });
        }
        let total: f64 = tl
            .data()
            .iter()
            .zip(target)
            .map(|(&x, &t)| x.max(0.0) - x * t + math::ln_1p(math::exp(-x.abs())))
            .sum();
        let out = Tensor::scalar(total / target.len() as f64);
        self.push("bce_with_logits", out, Op::Bce(logits, target.to_vec()))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a))
    }

    /// Backpropagates from a scalar output, adding into `grads`.
    pub fn backward(&self, out: Var, grads: &mut Gradients) -> Result<(), TensorError> {
        if self.value(out).shape() != (1, 1) {
            return Err(TensorError::Invalid { op: "backward", message: "output must be 1×1" });
        }
        self.backward_from(out, Tensor::scalar(1.0), grads)
    }

    /// Backpropagates an arbitrary upstream gradient `seed` for `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor, grads: &mut Gradients) -> Result<(), TensorError> {
        if seed.shape() != self.value(out).shape() {
            return Err(mismatch("backward", self.value(out), &seed));
        }
        let mut g: Vec<Option<Tensor>> = Vec::with_capacity(out.0 + 1);
        g.resize_with(out.0 + 1, || None);
        g[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(gi) = g[idx].take() else { continue };
            if !self.nodes[idx].grad {
                continue;
            }
            self.backprop_node(idx, gi, &mut g, grads);
        }
        Ok(())
    }

    fn slot<'g>(&self, g: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.value(v).shape();
        g[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn acc(&self, g: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        match &mut g[v.0] {
            Some(t) => t.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, gi: Tensor, g: &mut [Option<Tensor>], grads: &mut Gradients) {
        let node = &self.nodes[idx];
        let out = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => grads.add_owned(*id, gi),
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(a) {
                    gemm_nt(gi.data(), tb.data(), self.slot(g, a).data_mut(), n, m, k);
                }
                if self.needs(b) {
                    gemm_tn(ta.data(), gi.data(), self.slot(g, b).data_mut(), n, k, m);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                if self.needs(a) {
                    gemm_nn(gi.data(), tb.data(), self.slot(g, a).data_mut(), n, m, k);
                }
                if self.needs(b) {
                    gemm_tn(gi.data(), ta.data(), self.slot(g, b).data_mut(), n, m, k);
                }
            }
            &Op::Add(a, b) => {
                self.slot(g, a).add_assign(&gi);
                self.acc(g, b, gi);
            }
            &Op::Sub(a, b) => {
                self.slot(g, a).add_assign(&gi);
                let mut neg = gi;
                neg.scale_in_place(-1.0);
                self.acc(g, b, neg);
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.needs(a) {
                    for ((d, x), y) in self.slot(g, a).data_mut().iter_mut().zip(gi.data()).zip(tb.data()) {
                        *d += x * y;
                    }
                }
                if self.needs(b) {
                    for ((d, x), y) in self.slot(g, b).data_mut().iter_mut().zip(gi.data()).zip(ta.data()) {
                        *d += x * y;
                    }
                }
            }
            &Op::AddRow(a, b) => {
                let m = gi.cols();
                let gb = self.slot(g, b).data_mut();
                for row in gi.data().chunks_exact(m.max(1)) {
                    for (d, x) in gb.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                self.acc(g, a, gi);
            }
            &Op::Affine(a, s) => {
                let mut d = gi;
                d.scale_in_place(s);
                self.acc(g, a, d);
            }
            Op::ConcatCols(parts) => {
                let rows = gi.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let dst = self.slot(g, p).data_mut();
                    for r in 0..rows {
                        for (d, x) in dst[r * c..(r + 1) * c].iter_mut().zip(&gi.row(r)[offset..offset + c]) {
                            *d += x;
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    for (d, x) in self.slot(g, p).data_mut().iter_mut().zip(&gi.data()[offset..offset + len]) {
                        *d += x;
                    }
                    offset += len;
                }
            }
            &Op::SliceCols(a, start) => {
                let c = self.value(a).cols();
                let len = gi.cols();
                let dst = self.slot(g, a).data_mut();
                for r in 0..gi.rows() {
                    for (d, x) in dst[r * c + start..r * c + start + len].iter_mut().zip(gi.row(r)) {
                        *d += x;
                    }
                }
            }
            &Op::SliceRows(a, start) => {
                let c = gi.cols();
                let dst = self.slot(g, a).data_mut();
                for (d, x) in dst[start * c..start * c + gi.len()].iter_mut().zip(gi.data()) {
                    *d += x;
                }
            }
            &Op::RepeatRows(a) => {
                let c = gi.cols();
                let dst = self.slot(g, a).data_mut();
                for row in gi.data().chunks_exact(c.max(1)) {
                    for (d, x) in dst.iter_mut().zip(row) {
                        *d += x;
                    }
                }
            }
            Op::GatherRows(table, indices) => {
                let c = gi.cols();
                let dst = self.slot(g, *table).data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    for (d, x) in dst[i * c..(i + 1) * c].iter_mut().zip(gi.row(r)) {
                        *d += x;
                    }
                }
            }
            &Op::MeanRows(a) => {
                let n = self.value(a).rows();
                let inv = 1.0 / n as f64;
                let dst = self.slot(g, a).data_mut();
                for row in dst.chunks_exact_mut(gi.cols().max(1)) {
                    for (d, x) in row.iter_mut().zip(gi.data()) {
                        *d += x * inv;
                    }
                }
            }
            &Op::Reshape(a) => {
                let (r, c) = self.value(a).shape();
                let d = Tensor::new(r, c, gi.into_data()).expect("same length");
                self.acc(g, a, d);
            }
            &Op::LeakyRelu(a, slope) => {
                let ta = self.value(a);
                let mut d = gi;
                for (x, &v) in d.data_mut().iter_mut().zip(ta.data()) {
                    if v <= 0.0 {
                        // Exact zero even for an infinite upstream gradient.
                        *x = if slope == 0.0 { 0.0 } else { *x * slope };
                    }
                }
                self.acc(g, a, d);
            }
            &Op::Sigmoid(a) => {
                let y = out.expect("value");
                let mut d = gi;
                for (x, &s) in d.data_mut().iter_mut().zip(y.data()) {
                    *x *= s * (1.0 - s);
                }
                self.acc(g, a, d);
            }
            &Op::Tanh(a) => {
                let y = out.expect("value");
                let mut d = gi;
                for (x, &t) in d.data_mut().iter_mut().zip(y.data()) {
                    *x *= 1.0 - t * t;
                }
                self.acc(g, a, d);
            }
            Op::Softmax { logits, weights, ratio, fallback } => {
                let y = out.expect("value");
                let (n, m) = y.shape();
                let mut dl = Tensor::zeros(n, m);
                let mut dw = weights.map(|_| Tensor::zeros(n, m));
                for i in 0..n {
                    if fallback[i] {
                        continue;
                    }
                    let (yr, gr) = (y.row(i), gi.row(i));
                    let mean: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        let centred = gr[j] - mean;
                        dl.set(i, j, yr[j] * centred);
                        if let Some(dw) = dw.as_mut() {
                            dw.set(i, j, (ratio.get(i, j) * centred).clamp(-f64::MAX, f64::MAX));
                        }
                    }
                }
                self.acc(g, *logits, dl);
                if let (Some(w), Some(dw)) = (weights, dw) {
                    self.acc(g, *w, dw);
                }
            }
            Op::LabelBias(table, sets) => {
                let dst = self.slot(g, *table).data_mut();
                for (&s, &x) in sets.iter().zip(gi.data()) {
                    for_each_bit(s, |k| dst[k] += x);
                }
            }
            Op::LabelMass(a, sets) => {
                let k = gi.cols();
                let m = self.value(*a).cols();
                let dst = self.slot(g, *a).data_mut();
                for (cell, &s) in sets.iter().enumerate() {
                    let i = cell / m;
                    for_each_bit(s, |l| dst[cell] += gi.data()[i * k + l]);
                }
            }
            Op::Bce(logits, target) => {
                let tl = self.value(*logits);
                let scale = gi.data()[0] / target.len() as f64;
                let d = tl.data().iter().zip(target).map(|(&x, &t)| (math::sigmoid(x) - t) * scale).collect();
                self.acc(g, *logits, Tensor::new(tl.rows(), tl.cols(), d).expect("same shape"));
            }
            &Op::SumAll(a) => {
                let (r, c) = self.value(a).shape();
                self.acc(g, a, Tensor::filled(r, c, gi.data()[0]));
            }
        }
    }
}
