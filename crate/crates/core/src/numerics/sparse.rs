use super::Tensor;

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            assert!(r < n_rows && c < n_cols, "triplet out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            col_idx.push(c);
            values.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzeros of row `r` as `(col, value)` pairs in ascending column order.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                t.set(r, c, v);
            }
        }
        t
    }

    /// `A · x` for a `[n_cols, k]` dense right-hand side.
    pub fn matmul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows(), self.n_cols, "sparse matmul dimension mismatch");
        let k = x.cols();
        let mut out = Tensor::zeros(self.n_rows, k);
        let od = out.data_mut();
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                let xr = x.row_slice(c);
                for j in 0..k {
                    od[r * k + j] += v * xr[j];
                }
            }
        }
        out
    }

    /// `Aᵀ · x` for a `[n_rows, k]` dense right-hand side.
    pub fn t_matmul_dense(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows(), self.n_rows, "sparse matmul dimension mismatch");
        let k = x.cols();
        let mut out = Tensor::zeros(self.n_cols, k);
        let od = out.data_mut();
        for r in 0..self.n_rows {
            let xr = x.row_slice(r);
            for (c, v) in self.row(r) {
                for j in 0..k {
                    od[c * k + j] += v * xr[j];
                }
            }
        }
        out
    }

    /// `xᵀ A x` for a vector `x` of length `n_rows == n_cols`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        assert_eq!(self.n_rows, self.n_cols);
        assert_eq!(x.len(), self.n_rows);
        (0..self.n_rows)
            .map(|r| x[r] * self.row(r).map(|(c, v)| v * x[c]).sum::<f64>())
            .sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols
            && (0..self.n_rows).all(|r| self.row(r).all(|(c, v)| self.get(c, r) == v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_triplets_sum() {
        let m = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 2.0), (0, 1, 0.5)]);
        assert_eq!(m.get(0, 1), 1.5);
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn dense_products_match() {
        let m = SparseMatrix::from_triplets(2, 3, vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0)]);
        let x = Tensor::column(vec![1.0, 2.0, 3.0]);
        assert_eq!(m.matmul_dense(&x), m.to_dense().matmul(&x));
        let y = Tensor::column(vec![1.0, -1.0]);
        assert_eq!(m.t_matmul_dense(&y), m.to_dense().transpose().matmul(&y));
    }
}
