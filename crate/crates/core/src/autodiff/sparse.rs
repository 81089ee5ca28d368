use rayon::prelude::*;

use super::Tensor;
use crate::scalar::Scalar;

/// Fixed sparse operator in CSR form, used for neighbour aggregation.
///
/// The transpose is built once at construction because every backward pass
/// needs it.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
    transpose: Option<Box<SparseMatrix<T>>>,
}

impl<T: Scalar> SparseMatrix<T> {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed and
    /// each row's entries are kept in column order.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut m = Self::csr_only(rows, cols, triplets);
        let flipped: Vec<(usize, usize, T)> = triplets.iter().map(|&(r, c, v)| (c, r, v)).collect();
        m.transpose = Some(Box::new(Self::csr_only(cols, rows, &flipped)));
        m
    }

    fn csr_only(rows: usize, cols: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut sorted = triplets.to_vec();
        sorted.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < rows && c < cols, "triplet ({r},{c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        SparseMatrix { rows, cols, indptr, indices, values, transpose: None }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Entries of row `r` as `(col, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn transposed(&self) -> &SparseMatrix<T> {
        self.transpose.as_deref().expect("transpose built at construction")
    }

    pub fn to_dense(&self) -> Tensor<T> {
        let mut d = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                d.set(r, c, d.get(r, c) + v);
            }
        }
        d
    }

    /// `self * x`, rows computed independently (thread-count invariant).
    pub fn matmul_dense(&self, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(self.cols, x.rows());
        let d = x.cols();
        let mut out = Tensor::zeros(self.rows, d);
        if d == 0 {
            return out;
        }
        let fill = |r: usize, orow: &mut [T]| {
            for (c, w) in self.row(r) {
                for (o, &v) in orow.iter_mut().zip(x.row(c)) {
                    *o += w * v;
                }
            }
        };
        if rayon::current_num_threads() > 1 && self.nnz() * d > 1 << 15 {
            out.data_mut().par_chunks_mut(d).enumerate().for_each(|(r, orow)| fill(r, orow));
        } else {
            out.data_mut().chunks_mut(d).enumerate().for_each(|(r, orow)| fill(r, orow));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_transpose_matches() {
        let m = SparseMatrix::<f64>::from_triplets(2, 3, &[(0, 2, 1.0), (1, 0, 2.0), (0, 2, 0.5)]);
        assert_eq!(m.nnz(), 2);
        let d = m.to_dense();
        assert_eq!(d.get(0, 2), 1.5);
        assert_eq!(m.transposed().to_dense(), d.transpose());
    }

    #[test]
    fn sparse_product_matches_dense() {
        let m = SparseMatrix::<f64>::from_triplets(3, 3, &[(0, 1, 1.0), (1, 0, 1.0), (2, 2, 0.5), (1, 2, -2.0)]);
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(m.matmul_dense(&x), m.to_dense().matmul(&x));
    }
}
