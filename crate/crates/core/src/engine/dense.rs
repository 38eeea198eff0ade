use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// In-place lower Cholesky of a dense SPD matrix; the strict upper part is
/// left untouched and should be ignored.
pub(crate) fn cholesky_in_place(a: &mut DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    let max_diag = (0..n).fold(0.0f64, |m, i| m.max(a[(i, i)].abs()));
    let threshold = crate::sparse::PIVOT_TOLERANCE * max_diag;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= a[(j, k)] * a[(j, k)];
        }
        if !(d > threshold) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for k in 0..j {
            let ljk = a[(j, k)];
            if ljk != 0.0 {
                for i in j + 1..n {
                    a[(i, j)] -= a[(i, k)] * ljk;
                }
            }
        }
        for i in j + 1..n {
            a[(i, j)] /= d;
        }
    }
    Ok(())
}

/// Solves `L W = B` in place given the factor from [`cholesky_in_place`].
pub(crate) fn forward_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for j in 0..n {
            let v = b[(j, c)] / l[(j, j)];
            b[(j, c)] = v;
            if v != 0.0 {
                for i in j + 1..n {
                    b[(i, c)] -= l[(i, j)] * v;
                }
            }
        }
    }
}

/// Solves `Lᵀ X = B` in place.
pub(crate) fn backward_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for c in 0..b.ncols() {
        for j in (0..n).rev() {
            let mut v = b[(j, c)];
            for i in j + 1..n {
                v -= l[(i, j)] * b[(i, c)];
            }
            b[(j, c)] = v / l[(j, j)];
        }
    }
}

pub(crate) fn logdet_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}
