//! Compressed sparse column storage, symmetric (lower-triangle) matrices,
//! a simplicial Cholesky factorization and coordinate-format text I/O.

mod cholesky;
mod ordering;

pub use cholesky::{factorize, CholeskyFactor, Ordering, Symbolic, PIVOT_TOLERANCE};
pub use ordering::minimum_degree;

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// General sparse matrix in compressed-column form.
///
/// Row indices are sorted within each column and contain no duplicates.
/// Structural zeros produced by assembly are kept so that patterns stay
/// stable when values change.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(i, j, _) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) out of bounds");
            counts[j + 1] += 1;
        }
        for j in 0..ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(i, j, v) in triplets {
            let p = next[j];
            rows[p] = i;
            vals[p] = v;
            next[j] += 1;
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for j in 0..ncols {
            scratch.clear();
            scratch.extend((counts[j]..counts[j + 1]).map(|p| (rows[p], vals[p])));
            scratch.sort_by_key(|e| e.0);
            for &(i, v) in &scratch {
                if row_idx.len() > col_ptr[j] && *row_idx.last().unwrap() == i {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(i);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        CscMatrix {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        CscMatrix {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CscMatrix {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Converts a dense matrix, keeping entries with `|a_ij| > drop_tol`.
    pub fn from_dense(a: &DMatrix<f64>, drop_tol: f64) -> Self {
        let mut trip = Vec::new();
        for j in 0..a.ncols() {
            for i in 0..a.nrows() {
                if a[(i, j)].abs() > drop_tol {
                    trip.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), &trip)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Row indices and values of column `j`.
    pub fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (rows, vals) = self.col(j);
        match rows.binary_search(&i) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            (self.col_ptr[j]..self.col_ptr[j + 1]).map(move |p| (self.row_idx[p], j, self.values[p]))
        })
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[p]] += self.values[p] * xj;
            }
        }
        y
    }

    /// `selfᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols)
            .map(|j| {
                (self.col_ptr[j]..self.col_ptr[j + 1])
                    .map(|p| self.values[p] * x[self.row_idx[p]])
                    .sum()
            })
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let trip: Vec<_> = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &trip)
    }

    /// Sparse product `self * other` (Gustavson's algorithm).
    pub fn matmul(&self, other: &CscMatrix) -> CscMatrix {
        assert_eq!(self.ncols, other.nrows, "inner dimensions differ");
        let mut col_ptr = vec![0usize];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        let mut acc = vec![0.0; self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut touched = Vec::new();
        for j in 0..other.ncols {
            touched.clear();
            let (brows, bvals) = other.col(j);
            for (&k, &bkj) in brows.iter().zip(bvals) {
                let (arows, avals) = self.col(k);
                for (&i, &aik) in arows.iter().zip(avals) {
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = 0.0;
                        touched.push(i);
                    }
                    acc[i] += aik * bkj;
                }
            }
            touched.sort_unstable();
            for &i in &touched {
                row_idx.push(i);
                values.push(acc[i]);
            }
            col_ptr.push(row_idx.len());
        }
        CscMatrix {
            nrows: self.nrows,
            ncols: other.ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// `alpha * self + beta * other` over the union pattern.
    pub fn add_scaled(&self, alpha: f64, other: &CscMatrix, beta: f64) -> CscMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut trip: Vec<_> = self.triplets().map(|(i, j, v)| (i, j, alpha * v)).collect();
        trip.extend(other.triplets().map(|(i, j, v)| (i, j, beta * v)));
        Self::from_triplets(self.nrows, self.ncols, &trip)
    }

    /// Scales row `i` by `d[i]`.
    pub fn scale_rows(&self, d: &[f64]) -> CscMatrix {
        let mut out = self.clone();
        for p in 0..out.row_idx.len() {
            out.values[p] *= d[out.row_idx[p]];
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            a[(i, j)] += v;
        }
        a
    }

    /// Writes the matrix in MatrixMarket coordinate format (1-based indices).
    pub fn write_coordinate<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(out, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (i, j, v) in self.triplets() {
            writeln!(out, "{} {} {}", i + 1, j + 1, v)?;
        }
        Ok(())
    }
}

/// Symmetric sparse matrix stored as its lower triangle (row ≥ column).
#[derive(Debug, Clone, PartialEq)]
pub struct SymCsc {
    lower: CscMatrix,
}

impl SymCsc {
    /// Keeps the lower triangle of `full`; the upper part is assumed to mirror it.
    pub fn from_full(full: &CscMatrix) -> Self {
        assert_eq!(full.nrows, full.ncols, "symmetric matrix must be square");
        let trip: Vec<_> = full.triplets().filter(|&(i, j, _)| i >= j).collect();
        SymCsc {
            lower: CscMatrix::from_triplets(full.nrows, full.ncols, &trip),
        }
    }

    /// Builds from triplets that may name either triangle; each off-diagonal
    /// triplet is folded into the lower triangle.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let trip: Vec<_> = triplets
            .iter()
            .map(|&(i, j, v)| if i >= j { (i, j, v) } else { (j, i, v) })
            .collect();
        SymCsc {
            lower: CscMatrix::from_triplets(n, n, &trip),
        }
    }

    pub fn from_lower(lower: CscMatrix) -> Self {
        assert_eq!(lower.nrows, lower.ncols);
        debug_assert!(lower.triplets().all(|(i, j, _)| i >= j));
        SymCsc { lower }
    }

    pub fn identity(n: usize) -> Self {
        SymCsc {
            lower: CscMatrix::identity(n),
        }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let trip: Vec<_> = d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        SymCsc {
            lower: CscMatrix::from_triplets(d.len(), d.len(), &trip),
        }
    }

    pub fn from_dense(a: &DMatrix<f64>, drop_tol: f64) -> Self {
        Self::from_full(&CscMatrix::from_dense(a, drop_tol))
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows
    }

    pub fn lower(&self) -> &CscMatrix {
        &self.lower
    }

    pub fn lower_mut(&mut self) -> &mut CscMatrix {
        &mut self.lower
    }

    /// Number of stored (lower-triangle) entries.
    pub fn nnz(&self) -> usize {
        self.lower.nnz()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i >= j {
            self.lower.get(i, j)
        } else {
            self.lower.get(j, i)
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.lower.get(i, i)).collect()
    }

    pub fn to_full(&self) -> CscMatrix {
        let mut trip: Vec<_> = self.lower.triplets().collect();
        trip.extend(
            self.lower
                .triplets()
                .filter(|&(i, j, _)| i != j)
                .map(|(i, j, v)| (j, i, v)),
        );
        CscMatrix::from_triplets(self.dim(), self.dim(), &trip)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.to_full().to_dense()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(x.len(), n);
        let mut y = vec![0.0; n];
        for (i, j, v) in self.lower.triplets() {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    pub fn scaled(&self, factor: f64) -> SymCsc {
        let mut out = self.clone();
        out.lower.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// `alpha * self + beta * other` over the union pattern.
    pub fn add_scaled(&self, alpha: f64, other: &SymCsc, beta: f64) -> SymCsc {
        SymCsc {
            lower: self.lower.add_scaled(alpha, &other.lower, beta),
        }
    }

    /// True when both matrices share the exact stored pattern.
    pub fn same_pattern(&self, other: &SymCsc) -> bool {
        self.lower.col_ptr == other.lower.col_ptr && self.lower.row_idx == other.lower.row_idx
    }

    /// Writes the lower triangle in MatrixMarket symmetric coordinate format.
    pub fn write_coordinate<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut buf = String::new();
        writeln!(buf, "%%MatrixMarket matrix coordinate real symmetric").unwrap();
        writeln!(buf, "{} {} {}", self.dim(), self.dim(), self.nnz()).unwrap();
        for (i, j, v) in self.lower.triplets() {
            writeln!(buf, "{} {} {}", i + 1, j + 1, v).unwrap();
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    /// Reads a MatrixMarket coordinate file (`symmetric` or `general`).
    /// General input is symmetrized by keeping its lower triangle.
    pub fn read_coordinate<R: BufRead>(input: R) -> Result<SymCsc> {
        let mut lines = input.lines().enumerate();
        let mut header_seen = false;
        let mut dims: Option<(usize, usize, usize)> = None;
        let mut trip = Vec::new();
        let parse_err = |line: usize, message: &str| Error::Parse {
            line: line + 1,
            message: message.to_string(),
        };
        for (ln, line) in lines.by_ref() {
            let line = line?;
            let t = line.trim();
            if t.starts_with("%%MatrixMarket") {
                header_seen = true;
                continue;
            }
            if t.is_empty() || t.starts_with('%') {
                continue;
            }
            let fields: Vec<&str> = t.split_whitespace().collect();
            if dims.is_none() {
                if fields.len() != 3 {
                    return Err(parse_err(ln, "expected `rows cols nnz` size line"));
                }
                let p = |s: &str| s.parse::<usize>().map_err(|_| parse_err(ln, "bad size"));
                dims = Some((p(fields[0])?, p(fields[1])?, p(fields[2])?));
                continue;
            }
            if fields.len() != 3 {
                return Err(parse_err(ln, "expected `row col value`"));
            }
            let i: usize = fields[0].parse().map_err(|_| parse_err(ln, "bad row"))?;
            let j: usize = fields[1].parse().map_err(|_| parse_err(ln, "bad col"))?;
            let v: f64 = fields[2].parse().map_err(|_| parse_err(ln, "bad value"))?;
            if i == 0 || j == 0 {
                return Err(parse_err(ln, "indices are 1-based"));
            }
            trip.push((i - 1, j - 1, v));
        }
        let _ = header_seen;
        let (nr, nc, _) = dims.ok_or_else(|| parse_err(0, "missing size line"))?;
        if nr != nc {
            return Err(Error::DimensionMismatch { expected: nr, got: nc });
        }
        if trip.iter().any(|&(i, j, _)| i >= nr || j >= nc) {
            return Err(parse_err(0, "index out of range"));
        }
        let lower: Vec<_> = trip.into_iter().filter(|&(i, j, _)| i >= j).collect();
        Ok(SymCsc {
            lower: CscMatrix::from_triplets(nr, nr, &lower),
        })
    }
}
