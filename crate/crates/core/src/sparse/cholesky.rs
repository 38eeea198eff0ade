//! Up-looking simplicial Cholesky `P A Pᵀ = L Lᵀ`.
//!
//! The symbolic phase (ordering, elimination tree, pattern of `L`) depends
//! only on the sparsity pattern and is reusable across numeric
//! factorizations of matrices that share it.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::{minimum_degree, SymCsc};
use crate::error::{Error, Result};

/// Pivots below this fraction of the largest diagonal entry are rejected.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ordering {
    Natural,
    #[default]
    MinimumDegree,
}

/// Pattern-only analysis of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct Symbolic {
    n: usize,
    perm: Vec<usize>,
    // pattern of the input (lower, original numbering), used to reject misuse
    a_col_ptr: Vec<usize>,
    a_row_idx: Vec<usize>,
    // upper triangle of C = P A Pᵀ by columns; a_map[p] is the slot of A's p-th entry
    c_col_ptr: Vec<usize>,
    c_row_idx: Vec<usize>,
    a_map: Vec<usize>,
    // L by columns, diagonal first then increasing rows
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    // strict pattern of each row of L, topologically ordered for the up-looking sweep
    r_ptr: Vec<usize>,
    r_idx: Vec<usize>,
}

impl Symbolic {
    pub fn analyze(a: &SymCsc, ordering: Ordering) -> Symbolic {
        let n = a.dim();
        let perm = match ordering {
            Ordering::Natural => (0..n).collect(),
            Ordering::MinimumDegree => minimum_degree(a),
        };
        let mut inv_perm = vec![0; n];
        for (k, &i) in perm.iter().enumerate() {
            inv_perm[i] = k;
        }

        let lower = a.lower();
        // permuted upper triangle of C
        let mut counts = vec![0usize; n + 1];
        for (i, j, _) in lower.triplets() {
            let (pi, pj) = (inv_perm[i], inv_perm[j]);
            counts[pi.max(pj) + 1] += 1;
        }
        for k in 0..n {
            counts[k + 1] += counts[k];
        }
        let c_col_ptr = counts.clone();
        let mut next = counts;
        let mut c_row_idx = vec![0usize; lower.nnz()];
        let mut a_map = vec![0usize; lower.nnz()];
        for (p, (i, j, _)) in lower.triplets().enumerate() {
            let (pi, pj) = (inv_perm[i], inv_perm[j]);
            let col = pi.max(pj);
            let slot = next[col];
            next[col] += 1;
            c_row_idx[slot] = pi.min(pj);
            a_map[p] = slot;
        }

        // elimination tree
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for &row in &c_row_idx[c_col_ptr[k]..c_col_ptr[k + 1]] {
                let mut i = row;
                while i != NONE && i < k {
                    let inext = ancestor[i];
                    ancestor[i] = k;
                    if inext == NONE {
                        parent[i] = k;
                    }
                    i = inext;
                }
            }
        }

        // row patterns via ereach, column counts from them
        let mut r_ptr = Vec::with_capacity(n + 1);
        let mut r_idx = Vec::new();
        let mut col_count = vec![1usize; n];
        let mut mark = vec![NONE; n];
        let mut stack = Vec::new();
        let mut row = Vec::new();
        r_ptr.push(0);
        for k in 0..n {
            row.clear();
            mark[k] = k;
            for &start in &c_row_idx[c_col_ptr[k]..c_col_ptr[k + 1]] {
                let mut i = start;
                if i > k {
                    continue;
                }
                stack.clear();
                while mark[i] != k {
                    stack.push(i);
                    mark[i] = k;
                    i = parent[i];
                }
                while let Some(s) = stack.pop() {
                    row.push(s);
                }
            }
            // each path must precede the paths found before it, leaf first
            row.reverse();
            for &j in &row {
                col_count[j] += 1;
            }
            r_idx.extend_from_slice(&row);
            r_ptr.push(r_idx.len());
        }

        let mut l_col_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_col_ptr[j + 1] = l_col_ptr[j] + col_count[j];
        }
        let mut l_row_idx = vec![0usize; l_col_ptr[n]];
        let mut fill = l_col_ptr.clone();
        for k in 0..n {
            l_row_idx[fill[k]] = k;
            fill[k] += 1;
        }
        for k in 0..n {
            for &j in &r_idx[r_ptr[k]..r_ptr[k + 1]] {
                l_row_idx[fill[j]] = k;
                fill[j] += 1;
            }
        }

        Symbolic {
            n,
            perm,
            a_col_ptr: lower.col_ptr().to_vec(),
            a_row_idx: lower.row_idx().to_vec(),
            c_col_ptr,
            c_row_idx,
            a_map,
            l_col_ptr,
            l_row_idx,
            r_ptr,
            r_idx,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Nonzeros of `L`, diagonal included.
    pub fn l_nnz(&self) -> usize {
        self.l_row_idx.len()
    }

    pub fn matches(&self, a: &SymCsc) -> bool {
        a.dim() == self.n
            && a.lower().col_ptr() == self.a_col_ptr.as_slice()
            && a.lower().row_idx() == self.a_row_idx.as_slice()
    }

    /// Numeric factorization of a matrix with the analyzed pattern.
    pub fn factor(self: &Arc<Self>, a: &SymCsc) -> Result<CholeskyFactor> {
        assert!(self.matches(a), "matrix pattern differs from the analyzed one");
        let n = self.n;
        let mut c_vals = vec![0.0; self.c_row_idx.len()];
        for (p, &v) in a.lower().values().iter().enumerate() {
            c_vals[self.a_map[p]] = v;
        }
        let max_diag = a.diag().iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let threshold = PIVOT_TOLERANCE * max_diag;

        let lp = &self.l_col_ptr;
        let li = &self.l_row_idx;
        let mut lx = vec![0.0; li.len()];
        let mut next: Vec<usize> = lp[..n].iter().map(|&p| p + 1).collect();
        let mut x = vec![0.0; n];
        for k in 0..n {
            for p in self.c_col_ptr[k]..self.c_col_ptr[k + 1] {
                x[self.c_row_idx[p]] += c_vals[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &self.r_idx[self.r_ptr[k]..self.r_ptr[k + 1]] {
                let lki = x[i] / lx[lp[i]];
                x[i] = 0.0;
                for p in lp[i] + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                lx[next[i]] = lki;
                next[i] += 1;
            }
            if !(d > threshold) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: self.perm[k] });
            }
            lx[lp[k]] = d.sqrt();
        }
        Ok(CholeskyFactor {
            symbolic: Arc::clone(self),
            l_values: lx,
        })
    }
}

/// Numeric Cholesky factor with its (shared) symbolic analysis.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    symbolic: Arc<Symbolic>,
    l_values: Vec<f64>,
}

/// Factorizes with the default minimum-degree ordering.
pub fn factorize(a: &SymCsc) -> Result<CholeskyFactor> {
    Arc::new(Symbolic::analyze(a, Ordering::MinimumDegree)).factor(a)
}

impl CholeskyFactor {
    pub fn with_ordering(a: &SymCsc, ordering: Ordering) -> Result<CholeskyFactor> {
        Arc::new(Symbolic::analyze(a, ordering)).factor(a)
    }

    pub fn symbolic(&self) -> &Arc<Symbolic> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn permutation(&self) -> &[usize] {
        &self.symbolic.perm
    }

    pub fn l_nnz(&self) -> usize {
        self.symbolic.l_nnz()
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        let s = &self.symbolic;
        2.0 * (0..s.n).map(|j| self.l_values[s.l_col_ptr[j]].ln()).sum::<f64>()
    }

    /// Dense copy of `L` in the permuted numbering.
    pub fn l_dense(&self) -> DMatrix<f64> {
        let s = &self.symbolic;
        let mut l = DMatrix::zeros(s.n, s.n);
        for j in 0..s.n {
            for p in s.l_col_ptr[j]..s.l_col_ptr[j + 1] {
                l[(s.l_row_idx[p], j)] = self.l_values[p];
            }
        }
        l
    }

    fn forward(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let p0 = s.l_col_ptr[j];
            x[j] /= self.l_values[p0];
            let xj = x[j];
            if xj != 0.0 {
                for p in p0 + 1..s.l_col_ptr[j + 1] {
                    x[s.l_row_idx[p]] -= self.l_values[p] * xj;
                }
            }
        }
    }

    fn backward(&self, x: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let p0 = s.l_col_ptr[j];
            let mut acc = x[j];
            for p in p0 + 1..s.l_col_ptr[j + 1] {
                acc -= self.l_values[p] * x[s.l_row_idx[p]];
            }
            x[j] = acc / self.l_values[p0];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let s = &self.symbolic;
        if b.len() != s.n {
            return Err(Error::DimensionMismatch {
                expected: s.n,
                got: b.len(),
            });
        }
        let mut y: Vec<f64> = s.perm.iter().map(|&i| b[i]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        let mut out = vec![0.0; s.n];
        for (k, &i) in s.perm.iter().enumerate() {
            out[i] = y[k];
        }
        Ok(out)
    }

    /// `w = L⁻¹ P b`, so that `bᵀ A⁻¹ c = w_b · w_c`.
    pub fn half_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let s = &self.symbolic;
        if b.len() != s.n {
            return Err(Error::DimensionMismatch {
                expected: s.n,
                got: b.len(),
            });
        }
        let mut y: Vec<f64> = s.perm.iter().map(|&i| b[i]).collect();
        self.forward(&mut y);
        Ok(y)
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: b.nrows(),
            });
        }
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let col: Vec<f64> = b.column(c).iter().copied().collect();
            let x = self.solve(&col)?;
            out.column_mut(c).copy_from_slice(&x);
        }
        Ok(out)
    }

    /// Maps standard normals `z` to a draw with precision `A`:
    /// `x = Pᵀ L⁻ᵀ z`, so `Cov(x) = A⁻¹`.
    pub fn transform_normals(&self, z: &[f64]) -> Result<Vec<f64>> {
        let s = &self.symbolic;
        if z.len() != s.n {
            return Err(Error::DimensionMismatch {
                expected: s.n,
                got: z.len(),
            });
        }
        let mut y = z.to_vec();
        self.backward(&mut y);
        let mut out = vec![0.0; s.n];
        for (k, &i) in s.perm.iter().enumerate() {
            out[i] = y[k];
        }
        Ok(out)
    }
}
