//! Binary cross-entropy, InfoNCE over tribe views, and their weighted sum.

use std::rc::Rc;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss mask selects no rows")]
    EmptyMask,
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("contrastive batch needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid loss configuration: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the contrastive term.
    pub alpha: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Lower clamp applied inside every log.
    pub clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.1, tau: 0.2, clamp_eps: 1e-12 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(LossError::BadConfig("tau must be positive"));
        }
        if !(self.alpha >= 0.0) {
            return Err(LossError::BadConfig("alpha must be nonnegative"));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(LossError::BadConfig("clamp_eps must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// `-(1/|mask|) sum_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)]` over the rows in
/// `mask`, with both log arguments clamped below at `eps`.
///
/// `p` is an `n x 1` column and `labels[i]` is the label of row `mask[i]`.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, mask: &[usize], labels: &[bool], eps: f64) -> Result<Var> {
    if mask.is_empty() {
        return Err(LossError::EmptyMask);
    }
    assert_eq!(mask.len(), labels.len(), "one label per masked row");
    let pv = tape.value(p);
    for &i in mask {
        if i >= pv.rows() {
            return Err(AutodiffError::BadIndex { index: i, rows: pv.rows() }.into());
        }
        let v = pv.data()[i * pv.cols()];
        if !(T::zero()..=T::one()).contains(&v) {
            return Err(LossError::BadProbability(v.to_f64_lossy()));
        }
    }
    let eps = T::from_f64_lossy(eps);
    let sel = tape.row_gather(p, Rc::from(mask))?;
    let y: Vec<T> = labels.iter().map(|&l| if l { T::one() } else { T::zero() }).collect();
    let not_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
    let y = tape.constant(Tensor::column(y));
    let not_y = tape.constant(Tensor::column(not_y));
    let log_p = tape.log(sel, eps)?;
    let q = tape.affine(sel, -T::one(), T::one())?;
    let log_q = tape.log(q, eps)?;
    let a = tape.mul_elem(y, log_p)?;
    let b = tape.mul_elem(not_y, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -T::one())?)
}

/// Standard InfoNCE with cosine similarity: rows of `q` and `k` are
/// L2-normalized, `s_ij = q_i . k_j / tau`, and the loss is the mean over
/// rows of `-log softmax_j(s_i)[i]`.
pub fn infonce_loss<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, cfg: &LossConfig) -> Result<Var> {
    let (qv, kv) = (tape.value(q), tape.value(k));
    if qv.shape() != kv.shape() {
        return Err(AutodiffError::ShapeMismatch { op: "infonce", lhs: qv.shape(), rhs: kv.shape() }.into());
    }
    if qv.rows() < 2 {
        return Err(LossError::BatchTooSmall(qv.rows()));
    }
    let eps = T::from_f64_lossy(cfg.clamp_eps);
    let qn = tape.row_normalize(q, eps)?;
    let kn = tape.row_normalize(k, eps)?;
    let kt = tape.transpose(kn)?;
    let s = tape.matmul(qn, kt)?;
    let s = tape.scale(s, T::from_f64_lossy(1.0 / cfg.tau))?;
    let ls = tape.log_softmax_rows(s)?;
    let d = tape.diag(ls)?;
    let m = tape.mean(d);
    Ok(tape.scale(m, -T::one())?)
}

/// `bce + alpha * cl`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, bce: Var, cl: Var, cfg: &LossConfig) -> Result<Var> {
    let w = tape.scale(cl, T::from_f64_lossy(cfg.alpha))?;
    Ok(tape.add(bce, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bce_value(p: &[f64], mask: &[usize], y: &[bool]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(Tensor::column(p.to_vec()));
        let l = bce_loss(&mut tape, pv, mask, y, 1e-12).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn bce_examples() {
        assert!((bce_value(&[0.5], &[0], &[true]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_value(&[1.0], &[0], &[true]).abs() < 1e-11);
        assert!(bce_value(&[1.0 - 1e-15, 0.0], &[0, 1], &[true, false]) < 1e-11);
        let mut tape = Tape::<f64>::new();
        let pv = tape.constant(Tensor::column(vec![0.5]));
        assert_eq!(bce_loss(&mut tape, pv, &[], &[], 1e-12), Err(LossError::EmptyMask));
        let bad = tape.constant(Tensor::column(vec![1.5]));
        assert!(matches!(bce_loss(&mut tape, bad, &[0], &[true], 1e-12), Err(LossError::BadProbability(_))));
    }

    #[test]
    fn bce_gradient_is_closed_form() {
        let p = [0.3, 0.8, 0.6];
        let y = [true, false, true];
        let mut tape = Tape::<f64>::new();
        let pv = tape.var(Tensor::column(p.to_vec()));
        let l = bce_loss(&mut tape, pv, &[0, 1, 2], &y, 1e-12).unwrap();
        let g = tape.backward(l).unwrap();
        for i in 0..3 {
            let yi = if y[i] { 1.0 } else { 0.0 };
            let expect = (p[i] - yi) / (p[i] * (1.0 - p[i]) * 3.0);
            assert!((g.wrt(pv).unwrap().data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_uniform_is_ln_n() {
        let cfg = LossConfig::default();
        for n in [2, 5, 64] {
            let mut tape = Tape::<f64>::new();
            let q = tape.constant(Tensor::full(n, 3, 0.7));
            let l = infonce_loss(&mut tape, q, q, &cfg).unwrap();
            assert!((tape.value(l).item() - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_orthogonal_views_vanish() {
        let cfg = LossConfig { tau: 0.05, ..LossConfig::default() };
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::eye(4));
        let l = infonce_loss(&mut tape, q, q, &cfg).unwrap();
        assert!(tape.value(l).item() <= 1e-8);
    }

    #[test]
    fn infonce_rejects_single_row() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::full(1, 3, 1.0));
        assert_eq!(infonce_loss(&mut tape, q, q, &LossConfig::default()), Err(LossError::BatchTooSmall(1)));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let b = tape.constant(Tensor::scalar(0.6));
        let c = tape.constant(Tensor::scalar(0.7));
        let t = total_loss(&mut tape, b, c, &LossConfig { alpha: 0.5, ..Default::default() }).unwrap();
        assert!((tape.value(t).item() - 0.95).abs() < 1e-15);
        let t0 = total_loss(&mut tape, b, c, &LossConfig { alpha: 0.0, ..Default::default() }).unwrap();
        assert_eq!(tape.value(t0).item(), 0.6);
        let zero = tape.constant(Tensor::scalar(0.0));
        let t1 = total_loss(&mut tape, b, zero, &LossConfig { alpha: 1.0, ..Default::default() }).unwrap();
        assert_eq!(tape.value(t1).item(), 0.6);
    }
}
