use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compressed sparse row matrix, used as a constant left operand.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    pub fn from_dense(rows: usize, cols: usize, dense: &[T]) -> Self {
        assert_eq!(dense.len(), rows * cols);
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..rows {
            for (c, &v) in dense[r * cols..(r + 1) * cols].iter().enumerate() {
                if v != T::zero() {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, T)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r},{c}) out of range");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (s, e) = (self.indptr[r], self.indptr[r + 1]);
        self.indices[s..e].iter().copied().zip(self.values[s..e].iter().copied())
    }

    pub fn cast<U: Scalar>(&self) -> CsrMatrix<U> {
        CsrMatrix {
            rows: self.rows,
            cols: self.cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| U::from_f64(Scalar::to_f64(*v))).collect(),
        }
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[r * self.cols + c] += v;
            }
        }
        out
    }

    /// Sparse matrix made of the selected rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for &r in rows {
            let (s, e) = (self.indptr[r], self.indptr[r + 1]);
            indices.extend_from_slice(&self.indices[s..e]);
            values.extend_from_slice(&self.values[s..e]);
            indptr.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            indptr,
            indices,
            values,
        }
    }

    /// Dense rows `rows` of this matrix stacked into a tensor.
    pub fn gather_dense(&self, rows: &[usize]) -> Tensor<T> {
        let mut out = vec![T::zero(); rows.len() * self.cols];
        for (i, &r) in rows.iter().enumerate() {
            for (c, v) in self.row(r) {
                out[i * self.cols + c] = v;
            }
        }
        Tensor::new(&[rows.len(), self.cols], out).expect("consistent extents")
    }

    /// `self · dense` where `dense` is `cols×n`.
    pub fn matmul(&self, dense: &[T], n: usize) -> Result<Vec<T>> {
        if dense.len() != self.cols * n {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                lhs: vec![self.rows, self.cols],
                rhs: vec![dense.len() / n.max(1), n],
            });
        }
        let mut out = vec![T::zero(); self.rows * n];
        for r in 0..self.rows {
            let orow = &mut out[r * n..(r + 1) * n];
            for (c, v) in self.row(r) {
                for (o, &d) in orow.iter_mut().zip(&dense[c * n..(c + 1) * n]) {
                    *o += v * d;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · dense` where `dense` is `rows×n`.
    pub fn matmul_transposed(&self, dense: &[T], n: usize) -> Vec<T> {
        debug_assert_eq!(dense.len(), self.rows * n);
        let mut out = vec![T::zero(); self.cols * n];
        for r in 0..self.rows {
            let drow = &dense[r * n..(r + 1) * n];
            for (c, v) in self.row(r) {
                for (o, &d) in out[c * n..(c + 1) * n].iter_mut().zip(drow) {
                    *o += v * d;
                }
            }
        }
        out
    }
}
