//! Compressed sparse column storage, a minimum-degree fill-reducing
//! ordering, sparse Cholesky, and the explicit inverse of the Cholesky
//! factor.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("matrix is not positive definite (pivot {pivot} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Column-compressed sparse matrix with sorted row indices in each column.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
        for &(r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            cols[c].push((r, v));
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for mut col in cols {
            col.sort_by_key(|&(r, _)| r);
            for (r, v) in col {
                if row_idx.len() > *col_ptr.last().unwrap() && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self { nrows, ncols, col_ptr, row_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.row_idx[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (rows, vals) = self.col(j);
        match rows.binary_search(&i) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            let (rows, vals) = self.col(j);
            for (&i, &v) in rows.iter().zip(vals) {
                d[(i, j)] += v;
            }
        }
        d
    }

    /// `y = self * x` for a strided family of right-hand sides. `x` and `y`
    /// hold `k` interleaved components per row.
    pub fn mul_interleaved<const K: usize>(&self, x: &[[f64; K]], y: &mut [[f64; K]]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for yi in y.iter_mut() {
            *yi = [0.0; K];
        }
        for j in 0..self.ncols {
            let xj = x[j];
            if xj.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (rows, vals) = self.col(j);
            for (&i, &a) in rows.iter().zip(vals) {
                for k in 0..K {
                    y[i][k] += a * xj[k];
                }
            }
        }
    }

    /// `y = selfᵀ * x`, same layout as [`CscMatrix::mul_interleaved`].
    pub fn tr_mul_interleaved<const K: usize>(&self, x: &[[f64; K]], y: &mut [[f64; K]]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for j in 0..self.ncols {
            let (rows, vals) = self.col(j);
            let mut acc = [0.0; K];
            for (&i, &a) in rows.iter().zip(vals) {
                for k in 0..K {
                    acc[k] += a * x[i][k];
                }
            }
            y[j] = acc;
        }
    }

    /// Symmetric permutation `P A Pᵀ` where `perm[new] = old`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Self {
        let n = self.ncols;
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut trip = Vec::with_capacity(self.nnz());
        for j in 0..n {
            let (rows, vals) = self.col(j);
            for (&i, &v) in rows.iter().zip(vals) {
                trip.push((inv[i], inv[j], v));
            }
        }
        Self::from_triplets(n, n, &trip)
    }
}

/// Greedy minimum-degree ordering on the symmetric sparsity graph of `a`.
/// Ties are broken by the lower vertex index so the result is deterministic.
/// Returns `perm` with `perm[new] = old`.
pub fn minimum_degree_ordering(a: &CscMatrix) -> Vec<usize> {
    let n = a.ncols;
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for j in 0..n {
        for &i in a.col(j).0 {
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }
    let mut by_degree: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
    let mut eliminated = vec![false; n];
    let mut perm = Vec::with_capacity(n);
    while let Some((_, v)) = by_degree.pop_first() {
        eliminated[v] = true;
        perm.push(v);
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for &u in &nbrs {
            by_degree.remove(&(adj[u].len(), u));
            adj[u].remove(&v);
        }
        // Eliminating v turns its neighbourhood into a clique.
        for (k, &u) in nbrs.iter().enumerate() {
            for &w in &nbrs[k + 1..] {
                adj[u].insert(w);
                adj[w].insert(u);
            }
        }
        for &u in &nbrs {
            debug_assert!(!eliminated[u]);
            by_degree.insert((adj[u].len(), u));
        }
        adj[v].clear();
    }
    perm
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    pub l: CscMatrix,
}

impl Cholesky {
    /// Left-looking numeric factorization over the symbolic pattern given by
    /// the elimination tree. Only the lower triangle of `a` is read.
    pub fn factor(a: &CscMatrix) -> Result<Self, FactorError> {
        if a.nrows != a.ncols {
            return Err(FactorError::NotSquare { rows: a.nrows, cols: a.ncols });
        }
        let n = a.ncols;
        // Symbolic: column patterns (strictly below the diagonal).
        let mut pattern: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for j in 0..n {
            let mut set: BTreeSet<usize> = a.col(j).0.iter().copied().filter(|&i| i > j).collect();
            for &c in &children[j] {
                set.extend(pattern[c].iter().copied().filter(|&i| i > j));
            }
            pattern[j] = set.into_iter().collect();
            if let Some(&parent) = pattern[j].first() {
                children[parent].push(j);
            }
        }
        // Row lists: for each row j, the columns k < j with L[j, k] != 0.
        let mut row_cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for k in 0..n {
            for &i in &pattern[k] {
                row_cols[i].push(k);
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0);
        for p in &pattern {
            col_ptr.push(col_ptr.last().unwrap() + 1 + p.len());
        }
        let mut row_idx = vec![0; *col_ptr.last().unwrap()];
        let mut values = vec![0.0; row_idx.len()];
        for j in 0..n {
            row_idx[col_ptr[j]] = j;
            row_idx[col_ptr[j] + 1..col_ptr[j + 1]].copy_from_slice(&pattern[j]);
        }
        let mut work = vec![0.0; n];
        for j in 0..n {
            let (rows, vals) = a.col(j);
            for (&i, &v) in rows.iter().zip(vals) {
                if i >= j {
                    work[i] += v;
                }
            }
            for &k in &row_cols[j] {
                let (start, end) = (col_ptr[k], col_ptr[k + 1]);
                let rows_k = &row_idx[start..end];
                let pos = start + rows_k.binary_search(&j).expect("symbolic pattern contains row");
                let ljk = values[pos];
                for p in pos..end {
                    work[row_idx[p]] -= values[p] * ljk;
                }
            }
            let d = work[j];
            if !(d > 0.0) || !d.is_finite() {
                return Err(FactorError::NotPositiveDefinite { column: j, pivot: d });
            }
            let ljj = d.sqrt();
            work[j] = 0.0;
            values[col_ptr[j]] = ljj;
            for p in col_ptr[j] + 1..col_ptr[j + 1] {
                let i = row_idx[p];
                values[p] = work[i] / ljj;
                work[i] = 0.0;
            }
        }
        Ok(Self { l: CscMatrix { nrows: n, ncols: n, col_ptr, row_idx, values } })
    }

    /// Explicit inverse `L⁻¹`, column by column: column k solves `L s = e_k`
    /// by sparse forward substitution. No entries are dropped.
    pub fn inverse_factor(&self) -> CscMatrix {
        let l = &self.l;
        let n = l.ncols;
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        let mut x = vec![0.0; n];
        for k in 0..n {
            x[k] = 1.0;
            for j in k..n {
                if x[j] == 0.0 {
                    continue;
                }
                let (rows, vals) = l.col(j);
                x[j] /= vals[0];
                let xj = x[j];
                for (&i, &v) in rows[1..].iter().zip(&vals[1..]) {
                    x[i] -= v * xj;
                }
                row_idx.push(j);
                values.push(xj);
                x[j] = 0.0;
            }
            col_ptr.push(row_idx.len());
        }
        CscMatrix { nrows: n, ncols: n, col_ptr, row_idx, values }
    }

    /// Solves `L Lᵀ x = b` by two triangular solves.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let l = &self.l;
        let n = l.ncols;
        let mut x = b.to_vec();
        for j in 0..n {
            let (rows, vals) = l.col(j);
            x[j] /= vals[0];
            let xj = x[j];
            for (&i, &v) in rows[1..].iter().zip(&vals[1..]) {
                x[i] -= v * xj;
            }
        }
        for j in (0..n).rev() {
            let (rows, vals) = l.col(j);
            let mut s = x[j];
            for (&i, &v) in rows[1..].iter().zip(&vals[1..]) {
                s -= v * x[i];
            }
            x[j] = s / vals[0];
        }
        x
    }
}
