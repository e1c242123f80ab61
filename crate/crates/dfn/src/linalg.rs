//! Sparse and banded linear algebra behind the solver contract.
//!
//! The macroscopic Newton systems use a compressed sparse matrix with a
//! pattern fixed per mesh and a direct LU factorization (faer) that supports
//! both `A x = b` and `A^T x = b` against one factorization. The microscopic
//! systems are symmetric tridiagonal and use a dedicated LDL^T path.

use crate::error::{Error, Result};
use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

/// Column-compressed sparsity pattern, fixed once per mesh.
#[derive(Debug, Clone)]
pub struct SparsityPattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
}

impl SparsityPattern {
    /// Builds the pattern from (row, col) pairs; duplicates are merged.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Self {
        let mut by_col: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(r, c) in pairs {
            debug_assert!(r < n && c < n);
            by_col[c].push(r);
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for rows in &mut by_col {
            rows.sort_unstable();
            rows.dedup();
            row_idx.extend_from_slice(rows);
            col_ptr.push(row_idx.len());
        }
        Self {
            n,
            col_ptr,
            row_idx,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    fn slot(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.col_ptr[col];
        let hi = self.col_ptr[col + 1];
        self.row_idx[lo..hi]
            .binary_search(&row)
            .ok()
            .map(|k| lo + k)
    }
}

/// Sparse matrix whose nonzeros live inside a shared [`SparsityPattern`].
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pattern: std::sync::Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(pattern: std::sync::Arc<SparsityPattern>) -> Self {
        let nnz = pattern.nnz();
        Self {
            pattern,
            values: vec![0.0; nnz],
        }
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn reset(&mut self) {
        self.values.fill(0.0);
    }

    /// Accumulates into an entry; the entry must exist in the pattern.
    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        match self.pattern.slot(row, col) {
            Some(k) => self.values[k] += v,
            None => panic!("write outside sparsity pattern at ({row}, {col})"),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pattern.slot(row, col).map_or(0.0, |k| self.values[k])
    }

    /// Zeroes a whole row and sets its diagonal to `diag` (Dirichlet rows).
    pub fn replace_row_with_diagonal(&mut self, row: usize, diag: f64) {
        for c in 0..self.pattern.n {
            if let Some(k) = self.pattern.slot(row, c) {
                self.values[k] = if c == row { diag } else { 0.0 };
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.pattern.n];
        for c in 0..self.pattern.n {
            let xc = x[c];
            for k in self.pattern.col_ptr[c]..self.pattern.col_ptr[c + 1] {
                y[self.pattern.row_idx[k]] += self.values[k] * xc;
            }
        }
        y
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.pattern.n];
        for c in 0..self.pattern.n {
            let mut acc = 0.0;
            for k in self.pattern.col_ptr[c]..self.pattern.col_ptr[c + 1] {
                acc += self.values[k] * x[self.pattern.row_idx[k]];
            }
            y[c] = acc;
        }
        y
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let mut trips = Vec::with_capacity(self.pattern.nnz());
        for c in 0..self.pattern.n {
            for k in self.pattern.col_ptr[c]..self.pattern.col_ptr[c + 1] {
                trips.push(Triplet::new(self.pattern.row_idx[k], c, self.values[k]));
            }
        }
        SparseColMat::try_new_from_triplets(self.pattern.n, self.pattern.n, &trips)
            .map_err(|e| Error::LinearSolver(format!("matrix construction: {e:?}")))
    }
}

/// Direct sparse LU with forward and transposed solves off one factorization.
pub struct SparseLu {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    n: usize,
}

impl SparseLu {
    pub fn factorize(m: &SparseMatrix) -> Result<Self> {
        let a = m.to_faer()?;
        let lu = a
            .sp_lu()
            .map_err(|e| Error::LinearSolver(format!("sparse LU: {e:?}")))?;
        Ok(Self { lu, n: m.n() })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve_transpose(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }
}

/// Symmetric tridiagonal matrix (micro mass/stiffness operators).
#[derive(Debug, Clone)]
pub struct TriDiag {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl TriDiag {
    pub fn zeros(n: usize) -> Self {
        Self {
            diag: vec![0.0; n],
            off: vec![0.0; n.saturating_sub(1)],
        }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.off[i] * x[i + 1];
            }
            y[i] = acc;
        }
        y
    }

    /// Linear combination `a*self + b*other`, sharing the tridiagonal shape.
    pub fn axpby(&self, a: f64, other: &TriDiag, b: f64) -> TriDiag {
        TriDiag {
            diag: self
                .diag
                .iter()
                .zip(&other.diag)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            off: self
                .off
                .iter()
                .zip(&other.off)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }

    /// LDL^T factorization; fails if any pivot is non-positive (matrix not SPD).
    pub fn factorize_spd(&self) -> Result<TriDiagFactor> {
        let n = self.n();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        for i in 0..n {
            let mut di = self.diag[i];
            if i > 0 {
                di -= l[i - 1] * l[i - 1] * d[i - 1];
            }
            if di <= 0.0 {
                return Err(Error::LinearSolver(format!(
                    "tridiagonal LDL^T pivot {i} is {di:.3e}; matrix not SPD"
                )));
            }
            d[i] = di;
            if i + 1 < n {
                l[i] = self.off[i] / di;
            }
        }
        Ok(TriDiagFactor { d, l })
    }
}

/// LDL^T factors of a symmetric positive definite tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct TriDiagFactor {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl TriDiagFactor {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.d.len();
        let mut x = b.to_vec();
        for i in 1..n {
            x[i] -= self.l[i - 1] * x[i - 1];
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            x[i] -= self.l[i] * x[i + 1];
        }
        x
    }
}
