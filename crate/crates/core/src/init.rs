//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

/// Glorot uniform: entries drawn from `U(-b, b)` with `b = sqrt(6 / (rows + cols))`.
pub fn glorot<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound))).collect();
    Tensor::from_vec(rows, cols, data).expect("length matches")
}

/// Entries drawn from `N(0, sd^2)`.
pub fn normal<T: Scalar, R: Rng>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, sd).expect("sd is finite and positive");
    let data = (0..rows * cols).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::from_vec(rows, cols, data).expect("length matches")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn glorot_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Tensor<f64> = glorot(10, 22, &mut rng);
        let b = (6.0f64 / 32.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= b));
        assert!(w.data().iter().any(|v| v.abs() > b / 2.0));
    }

    #[test]
    fn normal_has_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = normal(200, 50, 0.02, &mut rng);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - 0.02).abs() < 1e-3);
    }
}
