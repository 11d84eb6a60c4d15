use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower-triangular factor `G` with `G * G^T = h`.
///
/// Only the lower triangle of `h` is read. Fails on the first pivot that is
/// not strictly positive.
pub fn cholesky_lower(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::Dimension(format!(
            "cholesky of non-square {}x{} matrix",
            n,
            h.ncols()
        )));
    }
    let mut g = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = h[(j, j)];
        for k in 0..j {
            d -= g[(j, k)] * g[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let gjj = d.sqrt();
        g[(j, j)] = gjj;
        for i in (j + 1)..n {
            let mut s = h[(i, j)];
            for k in 0..j {
                s -= g[(i, k)] * g[(j, k)];
            }
            g[(i, j)] = s / gjj;
        }
    }
    Ok(g)
}

/// Solves `G y = b` for lower-triangular `G`.
pub fn solve_lower(g: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = g.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= g[(i, k)] * y[k];
        }
        y[i] = s / g[(i, i)];
    }
    y
}

/// Solves `G^T y = b` for lower-triangular `G`.
pub fn solve_lower_transpose(g: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = g.nrows();
    let mut y = b.clone();
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= g[(k, i)] * y[k];
        }
        y[i] = s / g[(i, i)];
    }
    y
}

/// Solves `G G^T y = b`.
pub fn cholesky_solve(g: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    solve_lower_transpose(g, &solve_lower(g, b))
}
