//! Sparse symmetric matrices and a sparse Cholesky factorization.
//!
//! [`SymMatrix`] stores both triangles in compressed-row form with sorted
//! column indices. [`SymbolicCholesky`] fixes a sparsity pattern once (fill
//! reducing ordering plus symbolic analysis) so that the many numeric
//! refactorizations performed during fitting only touch values.

use std::collections::BTreeMap;
use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::sparse::linalg::SupernodalThreshold;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Par, Side};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SymMatrix {
    /// Builds a symmetric matrix from `(row, col, value)` entries. An
    /// off-diagonal entry is mirrored, so each unordered pair should be given
    /// once. Duplicates are summed and exact zeros dropped.
    pub fn from_entries(
        dim: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, v) in entries {
            assert!(
                i < dim && j < dim,
                "entry ({i}, {j}) outside dimension {dim}"
            );
            *acc.entry((i, j)).or_insert(0.0) += v;
            if i != j {
                *acc.entry((j, i)).or_insert(0.0) += v;
            }
        }
        Self::from_sorted_map(dim, acc)
    }

    fn from_sorted_map(dim: usize, acc: BTreeMap<(usize, usize), f64>) -> Self {
        let mut row_ptr = vec![0usize; dim + 1];
        let mut col_idx = Vec::with_capacity(acc.len());
        let mut values = Vec::with_capacity(acc.len());
        for ((i, j), v) in acc {
            if v == 0.0 {
                continue;
            }
            row_ptr[i + 1] += 1;
            col_idx.push(j);
            values.push(v);
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            dim,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        Self::from_entries(diag.len(), diag.iter().enumerate().map(|(i, &v)| (i, i, v)))
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            row_ptr: vec![0; dim + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored entries, counting both triangles.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (start, end) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.col_idx[start..end].binary_search(&j) {
            Ok(p) => self.values[start + p],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (start, end) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[start..end]
            .iter()
            .copied()
            .zip(self.values[start..end].iter().copied())
    }

    /// All stored entries, both triangles, in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// Entries with `col >= row`.
    pub fn upper_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries().filter(|&(i, j, _)| j >= i)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, other: &SymMatrix, s: f64) -> Self {
        assert_eq!(self.dim, other.dim);
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, v) in self.entries() {
            *acc.entry((i, j)).or_insert(0.0) += v;
        }
        for (i, j, v) in other.entries() {
            *acc.entry((i, j)).or_insert(0.0) += s * v;
        }
        Self::from_sorted_map(self.dim, acc)
    }

    /// Kronecker product `self ⊗ other`; index `a * other.dim + b`.
    pub fn kron(&self, other: &SymMatrix) -> Self {
        let m = other.dim;
        let dim = self.dim * m;
        let mut row_ptr = vec![0usize; dim + 1];
        let mut col_idx = Vec::with_capacity(self.nnz() * other.nnz());
        let mut values = Vec::with_capacity(self.nnz() * other.nnz());
        for a in 0..self.dim {
            for b in 0..m {
                let r = a * m + b;
                for (c, va) in self.row(a) {
                    for (d, vb) in other.row(b) {
                        col_idx.push(c * m + d);
                        values.push(va * vb);
                    }
                }
                row_ptr[r + 1] = col_idx.len();
            }
        }
        Self {
            dim,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        (0..self.dim)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        (0..self.dim)
            .map(|i| x[i] * self.row(i).map(|(j, v)| v * x[j]).sum::<f64>())
            .sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.row(i).map(|(_, v)| v).sum())
            .collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.entries()
            .all(|(i, j, v)| (v - self.get(j, i)).abs() <= tol)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (i, j, v) in self.entries() {
            m[(i, j)] = v;
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        let n = m.nrows();
        let mut acc = BTreeMap::new();
        for i in 0..n {
            for j in 0..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                if v != 0.0 {
                    acc.insert((i, j), v);
                }
            }
        }
        Self::from_sorted_map(n, acc)
    }
}

/// Fill-reducing ordering and symbolic factor for a fixed upper-triangular
/// sparsity pattern.
#[derive(Debug)]
pub struct SymbolicCholesky {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    inner: faer::sparse::linalg::cholesky::SymbolicCholesky<usize>,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    perm_fwd: Vec<usize>,
}

impl SymbolicCholesky {
    /// `pattern` lists `(row, col)` positions; they are folded into the upper
    /// triangle and deduplicated. The diagonal is always included.
    pub fn new(n: usize, pattern: impl IntoIterator<Item = (usize, usize)>) -> Result<Arc<Self>> {
        let mut cols: Vec<Vec<usize>> = (0..n).map(|j| vec![j]).collect();
        for (i, j) in pattern {
            let (r, c) = if i <= j { (i, j) } else { (j, i) };
            if c >= n {
                return Err(Error::InvalidDimension(format!(
                    "pattern entry ({i}, {j}) outside dimension {n}"
                )));
            }
            cols[c].push(r);
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for mut col in cols {
            col.sort_unstable();
            col.dedup();
            row_idx.extend(col);
            col_ptr.push(row_idx.len());
        }

        let a = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
        let inner = factorize_symbolic_cholesky(
            a,
            Side::Upper,
            SymmetricOrdering::Amd,
            CholeskySymbolicParams {
                supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SIMPLICIAL,
                ..Default::default()
            },
        )
        .map_err(|e| Error::InvalidInput(format!("symbolic factorization failed: {e:?}")))?;

        let (l_col_ptr, l_row_idx) = match inner.raw() {
            SymbolicCholeskyRaw::Simplicial(s) => (s.col_ptr().to_vec(), s.row_idx().to_vec()),
            SymbolicCholeskyRaw::Supernodal(_) => unreachable!("simplicial factorization forced"),
        };
        let perm_fwd = match inner.perm() {
            Some(p) => p.arrays().0.to_vec(),
            None => (0..n).collect(),
        };

        Ok(Arc::new(Self {
            n,
            col_ptr,
            row_idx,
            inner,
            l_col_ptr,
            l_row_idx,
            perm_fwd,
        }))
    }

    pub fn from_matrix(m: &SymMatrix) -> Result<Arc<Self>> {
        Self::new(m.dim(), m.upper_entries().map(|(i, j, _)| (i, j)))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Length of the value array expected by [`factorize`](Self::factorize).
    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn factor_nnz(&self) -> usize {
        self.l_row_idx.len()
    }

    /// Slot of `(row, col)` in the value array, if the position is in the pattern.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let (r, c) = if row <= col { (row, col) } else { (col, row) };
        let (start, end) = (self.col_ptr[c], self.col_ptr[c + 1]);
        self.row_idx[start..end]
            .binary_search(&r)
            .ok()
            .map(|p| start + p)
    }

    /// Scatters a matrix whose pattern is contained in this one into a value array.
    pub fn values_of(&self, m: &SymMatrix) -> Vec<f64> {
        let mut values = vec![0.0; self.nnz()];
        for (i, j, v) in m.upper_entries() {
            let p = self
                .position(i, j)
                .expect("matrix entry outside the symbolic pattern");
            values[p] += v;
        }
        values
    }

    pub fn factorize(self: &Arc<Self>, values: &[f64]) -> Result<Cholesky> {
        assert_eq!(values.len(), self.nnz());
        let a = SparseColMatRef::new(
            SymbolicSparseColMatRef::new_checked(
                self.n,
                self.n,
                &self.col_ptr,
                None,
                &self.row_idx,
            ),
            values,
        );
        let mut l_values = vec![0.0f64; self.inner.len_val()];
        let mut mem = MemBuffer::new(
            self.inner
                .factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default()),
        );
        self.inner
            .factorize_numeric_llt(
                &mut l_values,
                a,
                Side::Upper,
                Default::default(),
                Par::Seq,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(|_| Error::NotPositiveDefinite)?;
        let factor = Cholesky {
            symbolic: Arc::clone(self),
            l_values,
        };
        if factor.diagonal().any(|d| !(d.is_finite() && d > 0.0)) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(factor)
    }
}

/// Numeric factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    symbolic: Arc<SymbolicCholesky>,
    l_values: Vec<f64>,
}

impl Cholesky {
    pub fn from_matrix(m: &SymMatrix) -> Result<Self> {
        let symbolic = SymbolicCholesky::from_matrix(m)?;
        let values = symbolic.values_of(m);
        symbolic.factorize(&values)
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    fn diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        let s = &self.symbolic;
        (0..s.n).map(move |j| {
            let p = s.l_col_ptr[j];
            debug_assert_eq!(s.l_row_idx[p], j);
            self.l_values[p]
        })
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.diagonal().map(f64::ln).sum::<f64>()
    }

    fn lower_solve(&self, y: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let p0 = s.l_col_ptr[j];
            let yj = y[j] / self.l_values[p0];
            y[j] = yj;
            for p in p0 + 1..s.l_col_ptr[j + 1] {
                y[s.l_row_idx[p]] -= self.l_values[p] * yj;
            }
        }
    }

    fn upper_solve(&self, y: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let p0 = s.l_col_ptr[j];
            let mut acc = y[j];
            for p in p0 + 1..s.l_col_ptr[j + 1] {
                acc -= self.l_values[p] * y[s.l_row_idx[p]];
            }
            y[j] = acc / self.l_values[p0];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let s = &self.symbolic;
        assert_eq!(b.len(), s.n);
        let mut y: Vec<f64> = s.perm_fwd.iter().map(|&f| b[f]).collect();
        self.lower_solve(&mut y);
        self.upper_solve(&mut y);
        let mut x = vec![0.0; s.n];
        for (i, &f) in s.perm_fwd.iter().enumerate() {
            x[f] = y[i];
        }
        x
    }

    /// Solves `A X = B` for the columns of `b`.
    pub fn solve_columns(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let s = &self.symbolic;
        assert_eq!(b.nrows(), s.n);
        let m = b.ncols();
        if m == 0 {
            return DMatrix::zeros(s.n, 0);
        }
        // Row-major work buffer so the inner loops run over right-hand sides.
        let mut y = vec![0.0; s.n * m];
        for (i, &f) in s.perm_fwd.iter().enumerate() {
            for r in 0..m {
                y[i * m + r] = b[(f, r)];
            }
        }
        for j in 0..s.n {
            let p0 = s.l_col_ptr[j];
            let inv = 1.0 / self.l_values[p0];
            let (head, tail) = y.split_at_mut((j + 1) * m);
            let yj = &mut head[j * m..];
            yj.iter_mut().for_each(|v| *v *= inv);
            for p in p0 + 1..s.l_col_ptr[j + 1] {
                let i = s.l_row_idx[p];
                let l = self.l_values[p];
                let yi = &mut tail[(i - j - 1) * m..(i - j) * m];
                for (a, b) in yi.iter_mut().zip(yj.iter()) {
                    *a -= l * b;
                }
            }
        }
        for j in (0..s.n).rev() {
            let p0 = s.l_col_ptr[j];
            let (head, tail) = y.split_at_mut((j + 1) * m);
            let yj = &mut head[j * m..];
            for p in p0 + 1..s.l_col_ptr[j + 1] {
                let i = s.l_row_idx[p];
                let l = self.l_values[p];
                let yi = &tail[(i - j - 1) * m..(i - j) * m];
                for (a, b) in yj.iter_mut().zip(yi) {
                    *a -= l * b;
                }
            }
            let inv = 1.0 / self.l_values[p0];
            yj.iter_mut().for_each(|v| *v *= inv);
        }
        let mut x = DMatrix::zeros(s.n, m);
        for (i, &f) in s.perm_fwd.iter().enumerate() {
            for r in 0..m {
                x[(f, r)] = y[i * m + r];
            }
        }
        x
    }

    /// Maps a standard-normal vector `z` to a draw from `N(0, A⁻¹)`.
    pub fn correlate(&self, z: &[f64]) -> Vec<f64> {
        let s = &self.symbolic;
        assert_eq!(z.len(), s.n);
        let mut y = z.to_vec();
        self.upper_solve(&mut y);
        let mut x = vec![0.0; s.n];
        for (i, &f) in s.perm_fwd.iter().enumerate() {
            x[f] = y[i];
        }
        x
    }
}
