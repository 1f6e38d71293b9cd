//! Compressed sparse row matrices.

use crate::error::{check_len, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    symmetric: bool,
}

impl SparseOperator {
    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// explicit zeros dropped.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>, symmetric: bool) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}×{cols}");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut op = SparseOperator { rows, cols, row_ptr, col_idx, values, symmetric };
        op.prune();
        op
    }

    fn prune(&mut self) {
        let mut row_ptr = vec![0; self.rows + 1];
        let (mut cols, mut vals) = (Vec::with_capacity(self.values.len()), Vec::with_capacity(self.values.len()));
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.values[k] != 0.0 {
                    cols.push(self.col_idx[k]);
                    vals.push(self.values[k]);
                }
            }
            row_ptr[r + 1] = cols.len();
        }
        (self.row_ptr, self.col_idx, self.values) = (row_ptr, cols, vals);
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

    /// Whether the operator is symmetric by construction.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(cc, _)| cc == c).map_or(0.0, |(_, v)| v)
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!((x.len(), y.len()), (self.cols, self.rows));
        for r in 0..self.rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cols, x.len())?;
        let mut y = vec![0.0; self.rows];
        self.apply(x, &mut y);
        Ok(y)
    }

    /// `y += Aᵀ x`.
    pub fn apply_transpose_add(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k]] += self.values[k] * x[r];
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|r| self.get(r, r)).collect()
    }

    /// Largest `|A_rc - A_cr|`.
    pub fn asymmetry(&self) -> f64 {
        (0..self.rows).flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v))).fold(0.0, |m, (r, c, v)| {
            m.max((v - self.get(c, r)).abs())
        })
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let mut y = vec![0.0; self.rows];
        self.apply(v, &mut y);
        y.iter().zip(v).map(|(a, b)| a * b).sum()
    }

    /// `Σ_k BₖᵀBₖ` for operators with equal column counts.
    pub fn gram_sum(blocks: &[SparseOperator]) -> Self {
        let n = blocks.first().map_or(0, |b| b.cols);
        let mut t = Vec::new();
        for b in blocks {
            assert_eq!(b.cols, n, "gram blocks must share a column space");
            for r in 0..b.rows {
                let entries: Vec<(usize, f64)> = b.row(r).collect();
                for &(i, vi) in &entries {
                    for &(j, vj) in &entries {
                        t.push((i, j, vi * vj));
                    }
                }
            }
        }
        SparseOperator::from_triplets(n, n, t, true)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }
}
