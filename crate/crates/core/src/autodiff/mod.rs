//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every forward op together with the values its backward
//! rule needs. [`Tape::backward`] consumes the tape, walks it in exact reverse
//! order and returns the gradient of every leaf created with
//! [`Tape::var`] or [`Tape::param`].
//!
//! ```
//! use tribe_gnn::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.var(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]));
//! let s = tape.sum(w);
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.wrt(w).unwrap().data(), &[1.0; 4]);
//! ```

mod params;
mod sparse;
mod tensor;

use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

use crate::scalar::Scalar;

pub use params::{read_checkpoint, write_checkpoint, CheckpointError, ParamId, ParamStore};
pub use sparse::SparseMatrix;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("segment id {id} outside 0..{n_segments}")]
    BadSegmentId { id: usize, n_segments: usize },
    #[error("row index {index} outside 0..{rows}")]
    BadIndex { index: usize, rows: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    BadRate(f64),
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulElem(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Affine(Var, T),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowGather(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    SpMM(Var, Rc<SparseMatrix<T>>),
    GinCombine { h: Var, eps: Var, adj: Rc<SparseMatrix<T>> },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Log(Var, T),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Dropout(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
    Diag(Var),
    RowNormalize(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Record of executed ops.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    signature: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() });
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), signature: 0xcbf2_9ce4_8422_2325 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Hash of every piecewise branch taken so far (ReLU signs, log clamps).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn activation_signature(&self) -> u64 {
        self.signature
    }

    fn mix_signs(&mut self, a: Var, threshold: T) {
        let sig = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(self.signature, |h, &v| mix_bit(h, v > threshold));
        self.signature = sig;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::ConcatCols(vs) => vs.iter().any(|v| self.nodes[v.0].needs_grad),
            other => inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter of `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.var(store.value(id).clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: va.shape(), rhs: vb.shape() });
        }
        let out = va.matmul(vb);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `x * w + b` with `b` a `1 x n` row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.cols() != vw.rows() {
            return Err(AutodiffError::ShapeMismatch { op: "linear", lhs: vx.shape(), rhs: vw.shape() });
        }
        let mut out = vx.matmul(vw);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != (1, out.cols()) {
                return Err(AutodiffError::ShapeMismatch { op: "linear", lhs: out.shape(), rhs: vb.shape() });
            }
            let n = out.cols();
            for row in out.data_mut().chunks_mut(n.max(1)) {
                for (o, &bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
        }
        self.push(out, Op::Linear { x, w, b }, "linear")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    /// `a + row` where `row` is `1 x cols`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.shape() != (1, va.cols()) {
            return Err(AutodiffError::ShapeMismatch { op: "add_row", lhs: va.shape(), rhs: vr.shape() });
        }
        let mut out = va.clone();
        let n = out.cols().max(1);
        for r in out.data_mut().chunks_mut(n) {
            for (o, &b) in r.iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul_elem", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::MulElem(a, b), "mul_elem")
    }

    /// Scales row `i` of `a` by `c[i]` where `c` is `rows x 1`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(c));
        if vc.shape() != (va.rows(), 1) {
            return Err(AutodiffError::ShapeMismatch { op: "mul_col", lhs: va.shape(), rhs: vc.shape() });
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            let s = vc.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::MulCol(a, c), "mul_col")
    }

    /// `a * s` where `s` is a `1 x 1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.shape() != (1, 1) {
            return Err(AutodiffError::ShapeMismatch { op: "scale_by", lhs: self.value(a).shape(), rhs: vs.shape() });
        }
        let out = self.value(a).scale(vs.item());
        self.push(out, Op::ScaleBy(a, s), "scale_by")
    }

    /// Elementwise `mul * a + add` with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: T, add: T) -> Result<Var> {
        let out = self.value(a).map(|v| mul * v + add);
        self.push(out, Op::Affine(a, mul), "affine")
    }

    pub fn scale(&mut self, a: Var, mul: T) -> Result<Var> {
        self.affine(a, mul, T::zero())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (rows, 0),
                    rhs: self.value(p).shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let va = self.value(a);
        if start + width > va.cols() {
            return Err(AutodiffError::ShapeMismatch { op: "slice_cols", lhs: va.shape(), rhs: (start, width) });
        }
        let mut out = Tensor::zeros(va.rows(), width);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    /// Row `r` of the output is row `idx[r]` of `a`.
    pub fn row_gather(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let va = self.value(a);
        let mut out = Tensor::zeros(idx.len(), va.cols());
        for (r, &i) in idx.iter().enumerate() {
            if i >= va.rows() {
                return Err(AutodiffError::BadIndex { index: i, rows: va.rows() });
            }
            out.row_mut(r).copy_from_slice(va.row(i));
        }
        self.push(out, Op::RowGather(a, idx), "row_gather")
    }

    /// Sums rows sharing a segment id into an `n_segments x cols` tensor.
    pub fn segment_sum(&mut self, x: Var, segments: Rc<[usize]>, n_segments: usize) -> Result<Var> {
        let vx = self.value(x);
        if segments.len() != vx.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "segment_sum",
                lhs: vx.shape(),
                rhs: (segments.len(), 1),
            });
        }
        let mut out = Tensor::zeros(n_segments, vx.cols());
        for (r, &s) in segments.iter().enumerate() {
            if s >= n_segments {
                return Err(AutodiffError::BadSegmentId { id: s, n_segments });
            }
            for (o, &v) in out.row_mut(s).iter_mut().zip(vx.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::SegmentSum(x, segments), "segment_sum")
    }

    /// Sparse-dense product `m * x`.
    pub fn spmm(&mut self, m: Rc<SparseMatrix<T>>, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if m.cols() != vx.rows() {
            return Err(AutodiffError::ShapeMismatch { op: "spmm", lhs: (m.rows(), m.cols()), rhs: vx.shape() });
        }
        let out = m.matmul_dense(vx);
        self.push(out, Op::SpMM(x, m), "spmm")
    }

    /// GIN pre-aggregation `(1 + eps) * h + adj * h`, `eps` a `1 x 1` variable.
    pub fn gin_combine(&mut self, h: Var, eps: Var, adj: Rc<SparseMatrix<T>>) -> Result<Var> {
        let (vh, ve) = (self.value(h), self.value(eps));
        if adj.cols() != vh.rows() || adj.rows() != vh.rows() || ve.shape() != (1, 1) {
            return Err(AutodiffError::ShapeMismatch { op: "gin_combine", lhs: (adj.rows(), adj.cols()), rhs: vh.shape() });
        }
        let s = T::one() + ve.item();
        let mut out = adj.matmul_dense(vh);
        for (o, &v) in out.data_mut().iter_mut().zip(vh.data()) {
            *o += s * v;
        }
        self.push(out, Op::GinCombine { h, eps, adj }, "gin_combine")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.mix_signs(a, T::zero());
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.mix_signs(a, T::zero());
        let out = self.value(a).map(|v| if v > T::zero() { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(stable_sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    /// `ln(max(a, eps))`; the gradient is zero where the clamp is active.
    pub fn log(&mut self, a: Var, eps: T) -> Result<Var> {
        self.mix_signs(a, eps);
        let out = self.value(a).map(|v| v.max(eps).ln());
        self.push(out, Op::Log(a, eps), "log")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let n = out.cols().max(1);
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let n = out.cols().max(1);
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = m + row.iter().fold(T::zero(), |z, &v| z + (v - m).exp()).ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(a), "log_softmax_rows")
    }

    /// Row-wise two-way softmax of `n x 1` scores; outputs sum to one per row.
    pub fn softmax_pair(&mut self, e1: Var, e2: Var) -> Result<(Var, Var)> {
        let (v1, v2) = (self.value(e1), self.value(e2));
        if v1.shape() != v2.shape() || v1.cols() != 1 {
            return Err(AutodiffError::ShapeMismatch { op: "softmax_pair", lhs: v1.shape(), rhs: v2.shape() });
        }
        let both = self.concat_cols(&[e1, e2])?;
        let sm = self.softmax_rows(both)?;
        Ok((self.slice_cols(sm, 0, 1)?, self.slice_cols(sm, 1, 1)?))
    }

    /// Inverted dropout. `rng = None` is evaluation mode (identity).
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::BadRate(rate));
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - rate));
        let vx = self.value(x);
        let mask: Vec<T> =
            (0..vx.len()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep_scale }).collect();
        let out = Tensor::from_vec(vx.rows(), vx.cols(), vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect())?;
        self.push(out, Op::Dropout(x, mask), "dropout")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum").expect("sum of finite values")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::scalar(va.sum() / T::from_usize_lossy(va.len().max(1)));
        self.push(out, Op::Mean(a), "mean").expect("mean of finite values")
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rows() != va.cols() {
            return Err(AutodiffError::ShapeMismatch { op: "diag", lhs: va.shape(), rhs: va.shape() });
        }
        let out = Tensor::column((0..va.rows()).map(|i| va.get(i, i)).collect());
        self.push(out, Op::Diag(a), "diag")
    }

    /// Divides each row by `max(|row|_2, eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: T) -> Result<Var> {
        let mut out = self.value(a).clone();
        let mut sig = self.signature;
        for r in 0..out.rows() {
            let norm = row_norm(out.row(r));
            sig = mix_bit(sig, norm > eps);
            let d = norm.max(eps);
            out.row_mut(r).iter_mut().for_each(|v| *v /= d);
        }
        self.signature = sig;
        self.push(out, Op::RowNormalize(a, eps), "row_normalize")
    }

    /// Consumes the tape and returns gradients of `loss` for every leaf
    /// created by [`Tape::var`] or [`Tape::param`].
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut leaf_grads: Vec<(Var, Option<ParamId>, Tensor<T>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad && !matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].needs_grad;
            let acc = |v: Var, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if node.needs_grad {
                        leaf_grads.push((Var(i), node.param, g));
                    }
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        acc(*a, g.matmul_t(false, val(*b), true), &mut grads);
                    }
                    if wants(*b) {
                        acc(*b, val(*a).matmul_t(true, &g, false), &mut grads);
                    }
                }
                Op::Linear { x, w, b } => {
                    if wants(*x) {
                        acc(*x, g.matmul_t(false, val(*w), true), &mut grads);
                    }
                    if wants(*w) {
                        acc(*w, val(*x).matmul_t(true, &g, false), &mut grads);
                    }
                    if let Some(b) = b {
                        acc(*b, g.col_sums(), &mut grads);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose(), &mut grads),
                Op::Add(a, b) => {
                    acc(*b, g.clone(), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::AddRow(a, r) => {
                    acc(*r, g.col_sums(), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::MulElem(a, b) => {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y), &mut grads);
                    acc(*b, g.zip_map(val(*a), |x, y| x * y), &mut grads);
                }
                Op::MulCol(a, c) => {
                    let (va, vc) = (val(*a), val(*c));
                    if wants(*c) {
                        let dc = (0..va.rows())
                            .map(|r| g.row(r).iter().zip(va.row(r)).fold(T::zero(), |s, (&x, &y)| s + x * y))
                            .collect();
                        acc(*c, Tensor::column(dc), &mut grads);
                    }
                    if wants(*a) {
                        let mut da = g;
                        for r in 0..da.rows() {
                            let s = vc.data()[r];
                            da.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        }
                        acc(*a, da, &mut grads);
                    }
                }
                Op::ScaleBy(a, s) => {
                    if wants(*s) {
                        let ds = g.data().iter().zip(val(*a).data()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                        acc(*s, Tensor::scalar(ds), &mut grads);
                    }
                    acc(*a, g.scale(val(*s).item()), &mut grads);
                }
                Op::Affine(a, mul) => acc(*a, g.scale(*mul), &mut grads),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        if wants(p) {
                            let mut dp = Tensor::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            acc(p, dp, &mut grads);
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let va = val(*a);
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, da, &mut grads);
                }
                Op::RowGather(a, idx) => {
                    let va = val(*a);
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, &v) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*a, da, &mut grads);
                }
                Op::SegmentSum(x, seg) => {
                    let mut dx = Tensor::zeros(seg.len(), g.cols());
                    for (r, &s) in seg.iter().enumerate() {
                        dx.row_mut(r).copy_from_slice(g.row(s));
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::SpMM(x, m) => acc(*x, m.transposed().matmul_dense(&g), &mut grads),
                Op::GinCombine { h, eps, adj } => {
                    let vh = val(*h);
                    if wants(*eps) {
                        let de = g.data().iter().zip(vh.data()).fold(T::zero(), |s, (&x, &y)| s + x * y);
                        acc(*eps, Tensor::scalar(de), &mut grads);
                    }
                    if wants(*h) {
                        let s = T::one() + val(*eps).item();
                        let mut dh = adj.transposed().matmul_dense(&g);
                        for (o, &v) in dh.data_mut().iter_mut().zip(g.data()) {
                            *o += s * v;
                        }
                        acc(*h, dh, &mut grads);
                    }
                }
                Op::Relu(a) => {
                    let d = g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                    acc(*a, d, &mut grads);
                }
                Op::LeakyRelu(a, slope) => {
                    let d = g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { *slope * gv });
                    acc(*a, d, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y));
                    acc(*a, d, &mut grads);
                }
                Op::Log(a, eps) => {
                    let d = g.zip_map(val(*a), |gv, x| if x > *eps { gv / x } else { T::zero() });
                    acc(*a, d, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g.zip_map(y, |gv, yv| gv * yv);
                    for r in 0..d.rows() {
                        let dot = d.row(r).iter().fold(T::zero(), |s, &v| s + v);
                        let yr = y.row(r).to_vec();
                        for (o, yv) in d.row_mut(r).iter_mut().zip(yr) {
                            *o -= yv * dot;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let gs = g.row(r).iter().fold(T::zero(), |s, &v| s + v);
                        for (o, &lv) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= lv.exp() * gs;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Dropout(x, mask) => {
                    let mut d = g;
                    d.data_mut().iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
                    acc(*x, d, &mut grads);
                }
                Op::Sum(a) => {
                    let va = val(*a);
                    acc(*a, Tensor::full(va.rows(), va.cols(), g.item()), &mut grads);
                }
                Op::Mean(a) => {
                    let va = val(*a);
                    let s = g.item() / T::from_usize_lossy(va.len().max(1));
                    acc(*a, Tensor::full(va.rows(), va.cols(), s), &mut grads);
                }
                Op::Diag(a) => {
                    let n = val(*a).rows();
                    let mut d = Tensor::zeros(n, n);
                    for i in 0..n {
                        d.set(i, i, g.data()[i]);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::RowNormalize(a, eps) => {
                    let va = val(*a);
                    let y = &node.value;
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let norm = row_norm(va.row(r));
                        if norm > *eps {
                            let dot = g.row(r).iter().zip(y.row(r)).fold(T::zero(), |s, (&x, &z)| s + x * z);
                            for (o, &yv) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                                *o = (*o - yv * dot) / norm;
                            }
                        } else {
                            d.row_mut(r).iter_mut().for_each(|o| *o /= *eps);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
            }
        }
        Ok(Gradients { leaves: leaf_grads })
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::MulElem(a, b) | Op::MulCol(a, b) | Op::ScaleBy(a, b) => {
            vec![*a, *b]
        }
        Op::Linear { x, w, b } => {
            let mut v = vec![*x, *w];
            v.extend(b.iter().copied());
            v
        }
        Op::GinCombine { h, eps, .. } => vec![*h, *eps],
        Op::ConcatCols(vs) => vs.clone(),
        Op::Transpose(a)
        | Op::Affine(a, _)
        | Op::SliceCols(a, _)
        | Op::RowGather(a, _)
        | Op::SegmentSum(a, _)
        | Op::SpMM(a, _)
        | Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::Sigmoid(a)
        | Op::Log(a, _)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::Dropout(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Diag(a)
        | Op::RowNormalize(a, _) => vec![*a],
    }
}

fn mix_bit(h: u64, bit: bool) -> u64 {
    (h ^ u64::from(bit)).wrapping_mul(0x0100_0000_01b3)
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt()
}

/// Sigmoid that never evaluates `exp` of a large positive argument.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<(Var, Option<ParamId>, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(l, _, _)| *l == v).map(|(_, _, g)| g)
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (_, p, g) in &self.leaves {
            if let Some(id) = p {
                store.grad_mut(*id).add_assign(g);
            }
        }
    }
}

/// Deterministic dropout stream for `(seed, epoch, batch, view)`.
pub fn dropout_rng(seed: u64, epoch: u64, batch: u64, view: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix(splitmix(splitmix(epoch) ^ batch) ^ view));
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
