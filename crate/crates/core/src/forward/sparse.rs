//! Sparse symmetric storage: CSR for assembly and inspection, skyline
//! (variable band) Cholesky for the grounded solve.

use crate::error::{Error, Result};

/// Square sparse matrix in compressed-row form, both triangles stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds the pattern from per-row sorted, deduplicated column lists.
    pub(crate) fn from_pattern(rows: &[Vec<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for r in rows {
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        CsrMatrix { n: rows.len(), row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    /// Position of entry `(i, j)` in `values`.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (self.col_idx[p], self.values[p]))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// `max |A_ij - A_ji|` over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }
}

/// Cholesky factor in skyline storage: row `i` holds `L[i][first[i]..=i]`.
#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineCholesky {
    /// Factors the leading `n` rows and columns of `a`, i.e. `a` with every
    /// index `>= n` removed (grounded).
    pub fn factor(a: &CsrMatrix, n: usize) -> Result<Self> {
        let mut first = vec![0usize; n];
        for (i, f) in first.iter_mut().enumerate() {
            *f = a.row(i).map(|(j, _)| j).filter(|&j| j <= i).min().unwrap_or(i);
        }
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + i - first[i] + 1);
        }
        let mut data = vec![0.0; start[n]];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    data[start[i] + j - first[i]] = v;
                }
            }
        }

        let mut min_pivot = f64::INFINITY;
        let mut max_pivot: f64 = 0.0;
        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let (ri, rj) = (start[i] + k0 - fi, start[j] + k0 - fj);
                let len = j - k0;
                let s: f64 = data[ri..ri + len].iter().zip(&data[rj..rj + len]).map(|(x, y)| x * y).sum();
                let diag = data[start[j + 1] - 1];
                let p = start[i] + j - fi;
                data[p] = (data[p] - s) / diag;
            }
            let row = &data[start[i]..start[i + 1] - 1];
            let s: f64 = row.iter().map(|x| x * x).sum();
            let d = data[start[i + 1] - 1] - s;
            if !(d > 0.0) || !d.is_finite() {
                let cond = if max_pivot > 0.0 { max_pivot / min_pivot.max(f64::MIN_POSITIVE) } else { f64::INFINITY };
                return Err(Error::Solver(format!(
                    "non-positive pivot {d:.3e} at row {i}; pivot ratio so far {cond:.3e}"
                )));
            }
            min_pivot = min_pivot.min(d);
            max_pivot = max_pivot.max(d);
            data[start[i + 1] - 1] = d.sqrt();
        }
        Ok(SkylineCholesky { first, start, data })
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Solves `L L^T x = b` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.dim();
        // forward: L y = b
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1] - 1];
            let s: f64 = row.iter().zip(&x[fi..i]).map(|(l, y)| l * y).sum();
            x[i] = (x[i] - s) / self.data[self.start[i + 1] - 1];
        }
        // backward: L^T x = y, column sweep over the rows of L
        for i in (0..n).rev() {
            x[i] /= self.data[self.start[i + 1] - 1];
            let xi = x[i];
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1] - 1];
            for (k, l) in row.iter().enumerate() {
                x[fi + k] -= l * xi;
            }
        }
    }
}
