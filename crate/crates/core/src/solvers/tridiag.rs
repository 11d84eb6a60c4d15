//! Tridiagonal matrices: products, Thomas solves and a banded exponential.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tridiagonal `n x n` matrix; `sub[i]` sits at `(i+1, i)` and `sup[i]` at `(i, i+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn new(sub: Vec<f64>, diag: Vec<f64>, sup: Vec<f64>) -> Result<Self> {
        let n = diag.len();
        if n == 0 || sub.len() + 1 != n || sup.len() + 1 != n {
            return Err(Error::Dimension(format!(
                "tridiagonal bands of length {}, {}, {}",
                sub.len(),
                n,
                sup.len()
            )));
        }
        if sub.iter().chain(&diag).chain(&sup).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("tridiagonal entries must be finite".into()));
        }
        Ok(Self { sub, diag, sup })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i + 1 < n {
                m[(i + 1, i)] = self.sub[i];
                m[(i, i + 1)] = self.sup[i];
            }
        }
        m
    }

    /// Row `i` of `self * x`.
    #[inline]
    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let mut s = self.diag[i] * x[i];
        if i > 0 {
            s += self.sub[i - 1] * x[i - 1];
        }
        if i + 1 < self.dim() {
            s += self.sup[i] * x[i + 1];
        }
        s
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.row_dot(i, x.as_slice()))
    }

    /// Solves `self * X = rhs` column by column without pivoting.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if rhs.nrows() != n {
            return Err(Error::Dimension("right-hand side has the wrong row count".into()));
        }
        let scale = self.diag.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut c = vec![0.0; n];
        let mut piv = vec![0.0; n];
        piv[0] = self.diag[0];
        for i in 1..n {
            if piv[i - 1].abs() <= 1e-14 * scale {
                return Err(Error::Numerical("zero pivot in tridiagonal solve".into()));
            }
            c[i - 1] = self.sup[i - 1] / piv[i - 1];
            piv[i] = self.diag[i] - self.sub[i - 1] * c[i - 1];
        }
        if piv[n - 1].abs() <= 1e-14 * scale {
            return Err(Error::Numerical("zero pivot in tridiagonal solve".into()));
        }
        let mut out = rhs.clone();
        for mut col in out.column_iter_mut() {
            col[0] /= piv[0];
            for i in 1..n {
                col[i] = (col[i] - self.sub[i - 1] * col[i - 1]) / piv[i];
            }
            for i in (0..n - 1).rev() {
                col[i] -= c[i] * col[i + 1];
            }
        }
        Ok(out)
    }

    /// `exp(t * self)` by a Chebyshev expansion on the Gershgorin interval.
    ///
    /// Requires `sub[i] * sup[i] >= 0`, which makes the spectrum real. Column
    /// `j` of `T_k(M)` is supported on rows `j-k..=j+k`, so each column is
    /// advanced only inside that window.
    pub fn exponential(&self, t: f64) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if !t.is_finite() || t < 0.0 {
            return Err(Error::InvalidArgument("exponential time must be finite and non-negative".into()));
        }
        if self.sub.iter().zip(&self.sup).any(|(a, b)| a * b < 0.0) {
            return Err(Error::InvalidArgument(
                "tridiagonal exponential needs sub[i] * sup[i] >= 0".into(),
            ));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let r = if i > 0 { self.sub[i - 1].abs() } else { 0.0 } + if i + 1 < n { self.sup[i].abs() } else { 0.0 };
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        let z = t * half;
        if t * hi > 700.0 {
            return Err(Error::Numerical("matrix exponential would overflow".into()));
        }
        let scale = (t * hi).exp();
        let coef: Vec<f64> = scaled_bessel_i(z).into_iter().map(|c| c * scale).collect();
        let terms = coef.len();

        let inv_half = if half > 0.0 { 1.0 / half } else { 0.0 };
        // M_hat = (self - mid I) / half, applied inside a row window
        let apply = |x: &[f64], y: &mut [f64], from: usize, to: usize| {
            for i in from..to {
                y[i] = (self.row_dot(i, x) - mid * x[i]) * inv_half;
            }
        };

        let mut out = DMatrix::zeros(n, n);
        let mut prev = vec![0.0; n];
        let mut cur = vec![0.0; n];
        let mut next = vec![0.0; n];
        for j in 0..n {
            prev.iter_mut().for_each(|v| *v = 0.0);
            cur.iter_mut().for_each(|v| *v = 0.0);
            next.iter_mut().for_each(|v| *v = 0.0);
            let mut col = out.column_mut(j);
            prev[j] = 1.0;
            col[j] = coef[0];
            if terms == 1 {
                continue;
            }
            let (mut from, mut to) = (j.saturating_sub(1), (j + 2).min(n));
            apply(&prev, &mut cur, from, to);
            for i in from..to {
                col[i] += coef[1] * cur[i];
            }
            for &ck in &coef[2..] {
                from = from.saturating_sub(1);
                to = (to + 1).min(n);
                for i in from..to {
                    let ax = (self.row_dot(i, &cur) - mid * cur[i]) * inv_half;
                    next[i] = 2.0 * ax - prev[i];
                    col[i] += ck * next[i];
                }
                std::mem::swap(&mut prev, &mut cur);
                std::mem::swap(&mut cur, &mut next);
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("matrix exponential overflowed".into()));
        }
        Ok(out)
    }
}

/// Chebyshev weights of `exp(z y)` on `[-1, 1]`, divided by `e^z`:
/// `[e^{-z} I_0(z), 2 e^{-z} I_1(z), ...]`, truncated once negligible.
///
/// Miller's backward recurrence, normalised with `I_0 + 2 sum I_k = e^z`.
fn scaled_bessel_i(z: f64) -> Vec<f64> {
    if z == 0.0 {
        return vec![1.0];
    }
    let start = (20.0 * z.sqrt() + 60.0).ceil() as usize;
    let mut b = vec![0.0; start + 2];
    b[start] = 1e-300;
    for k in (1..=start).rev() {
        b[k - 1] = (2.0 * k as f64 / z) * b[k] + b[k + 1];
        if b[k - 1] > 1e250 {
            for v in b[k - 1..].iter_mut() {
                *v *= 1e-250;
            }
        }
    }
    let norm = b[0] + 2.0 * b[1..].iter().sum::<f64>();
    let mut coef: Vec<f64> = b[..start].iter().enumerate().map(|(k, v)| if k == 0 { v / norm } else { 2.0 * v / norm }).collect();
    let peak = coef.iter().cloned().fold(0.0, f64::max);
    while coef.len() > 1 && *coef.last().unwrap() < 1e-20 * peak {
        coef.pop();
    }
    coef
}
