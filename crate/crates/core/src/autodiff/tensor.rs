use rayon::prelude::*;

use super::AutodiffError;
use crate::scalar::Scalar;

/// Dense row-major 2-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, AutodiffError> {
        if data.len() != rows * cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Panics on ragged input; meant for literals in tests and examples.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor { rows: rows.len(), cols, data: rows.iter().flat_map(|r| r.iter().copied()).collect() }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self, AutodiffError> {
        Self::from_vec(rows, cols, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn column(data: Vec<T>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Column sums as a `1 x cols` tensor.
    pub fn col_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// `op(self) * op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, trans_a: bool, other: &Self, trans_b: bool) -> Self {
        let (m, k) = if trans_a { (self.cols, self.rows) } else { (self.rows, self.cols) };
        let (k2, n) = if trans_b { (other.cols, other.rows) } else { (other.rows, other.cols) };
        debug_assert_eq!(k, k2);
        let mut out = Self::zeros(m, n);
        let (rsa, csa) = if trans_a { (1, self.cols as isize) } else { (self.cols as isize, 1) };
        let (rsb, csb) = if trans_b { (1, other.cols as isize) } else { (other.cols as isize, 1) };
        gemm_rows(m, k, n, &self.data, rsa, csa, &other.data, rsb, csb, &mut out.data);
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        self.matmul_t(false, other, false)
    }
}

const PAR_MIN_FLOPS: usize = 1 << 16;

/// Row-blocked GEMM. Output rows are split across the current rayon pool;
/// each output element is reduced over `k` in the same order regardless of
/// the split, so results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
fn gemm_rows<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let threads = rayon::current_num_threads();
    let run = |row0: usize, chunk: &mut [T]| {
        let rows = chunk.len() / n;
        // SAFETY: row0 + rows <= m, strides describe the caller's buffers and
        // `chunk` is a disjoint slice of the output.
        unsafe {
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                a.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                T::zero(),
                chunk.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    };
    if threads <= 1 || m * k * n < PAR_MIN_FLOPS || m < 2 * threads {
        run(0, c);
        return;
    }
    let rows_per = m.div_ceil(threads * 4).max(8);
    c.par_chunks_mut(rows_per * n).enumerate().for_each(|(i, chunk)| run(i * rows_per, chunk));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let b = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&b), b);
    }

    #[test]
    fn hand_checked_product() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::<f64>::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&b), Tensor::from_rows(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn transposed_operands() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let direct = a.transpose().matmul(&a);
        assert_eq!(a.matmul_t(true, &a, false), direct);
        assert_eq!(a.matmul_t(false, &a, true), a.matmul(&a.transpose()));
    }

    #[test]
    fn thread_count_does_not_change_products() {
        let m = 300;
        let k = 40;
        let n = 24;
        let a = Tensor::<f64>::from_vec(m, k, (0..m * k).map(|i| ((i * 37 % 101) as f64).sin()).collect())
            .unwrap();
        let b = Tensor::<f64>::from_vec(k, n, (0..k * n).map(|i| ((i * 13 % 29) as f64).cos()).collect())
            .unwrap();
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| a.matmul(&b));
        let par = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| a.matmul(&b));
        assert_eq!(serial, par);
        let serial_t =
            rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| a.matmul_t(true, &a, false));
        let par_t =
            rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| a.matmul_t(true, &a, false));
        assert_eq!(serial_t, par_t);
    }
}
