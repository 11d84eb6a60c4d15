//! Discrete-time LTI plant, polyhedral sets and condensed prediction matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::solvers::{solve_lp, LpProblem, LpStatus};

pub const DEFAULT_MEMBERSHIP_TOL: f64 = 1e-9;

/// `x_{k+1} = A x_k + B u_k`.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension(format!("A is {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::Dimension(format!(
                "B has {} rows but A is {}x{}",
                b.nrows(),
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("system matrices must be finite".into()));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn simulate_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "state {} / input {} for a system with n={} m={}",
                x.len(),
                u.len(),
                self.state_dim(),
                self.input_dim()
            )));
        }
        let mut next = &self.b * u;
        next.gemv(1.0, &self.a, x, 1.0);
        Ok(next)
    }
}

/// One inequality row stored by its nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseRow {
    pub fn from_dense(row: &[f64]) -> Self {
        let (idx, val) = row
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        Self { idx, val }
    }

    pub fn unit(i: usize, sign: f64) -> Self {
        Self {
            idx: vec![i],
            val: vec![sign],
        }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &v)| v * x[i]).sum()
    }

    /// `|c| . w`, with zero coefficients never touching `w`.
    pub fn abs_dot(&self, w: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &v)| v.abs() * w[i]).sum()
    }

    pub fn to_dense(&self, dim: usize) -> DVector<f64> {
        let mut out = DVector::zeros(dim);
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            out[i] = v;
        }
        out
    }
}

/// `{x | C x <= b}`, with `C` kept row-sparse.
#[derive(Debug, Clone)]
pub struct PolyhedralSet {
    dim: usize,
    rows: Vec<SparseRow>,
    b: DVector<f64>,
}

impl PolyhedralSet {
    pub fn new(dim: usize, rows: Vec<SparseRow>, b: DVector<f64>) -> Result<Self> {
        if rows.len() != b.len() {
            return Err(Error::Dimension(format!("{} rows but {} bounds", rows.len(), b.len())));
        }
        if rows.iter().any(|r| r.idx.iter().any(|&i| i >= dim)) {
            return Err(Error::Dimension("row index outside the set dimension".into()));
        }
        Ok(Self { dim, rows, b })
    }

    pub fn from_dense(c: &DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let rows = (0..c.nrows())
            .map(|i| SparseRow::from_dense(c.row(i).transpose().as_slice()))
            .collect();
        Self::new(c.ncols(), rows, b)
    }

    /// `{x | x <= ub}`.
    pub fn upper_bounds(ub: &DVector<f64>) -> Self {
        let rows = (0..ub.len()).map(|i| SparseRow::unit(i, 1.0)).collect();
        Self {
            dim: ub.len(),
            rows,
            b: ub.clone(),
        }
    }

    /// `{x | lo <= x <= hi}` as `x <= hi, -x <= -lo` (interleaved per coordinate).
    pub fn bounds(lo: &DVector<f64>, hi: &DVector<f64>) -> Self {
        let mut rows = Vec::with_capacity(2 * lo.len());
        let mut b = Vec::with_capacity(2 * lo.len());
        for i in 0..lo.len() {
            rows.push(SparseRow::unit(i, 1.0));
            b.push(hi[i]);
            rows.push(SparseRow::unit(i, -1.0));
            b.push(-lo[i]);
        }
        Self {
            dim: lo.len(),
            rows,
            b: DVector::from_vec(b),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn row(&self, j: usize) -> &SparseRow {
        &self.rows[j]
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn dense_matrix(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.rows.len(), self.dim);
        for (i, r) in self.rows.iter().enumerate() {
            for (&j, &v) in r.idx.iter().zip(&r.val) {
                c[(i, j)] = v;
            }
        }
        c
    }

    /// `C x <= b + tol`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "point of length {} for a set in R^{}",
                x.len(),
                self.dim
            )));
        }
        Ok(self
            .rows
            .iter()
            .zip(self.b.iter())
            .all(|(r, &b)| r.dot(x.as_slice()) <= b + tol))
    }

    /// Per-coordinate bounds when every row touches a single coordinate.
    pub fn coordinate_bounds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let mut lo = DVector::from_element(self.dim, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(self.dim, f64::INFINITY);
        for (r, &b) in self.rows.iter().zip(self.b.iter()) {
            match r.idx.len() {
                0 => {
                    if b < 0.0 {
                        // Empty set: encode with crossed bounds on coordinate 0.
                        if self.dim > 0 {
                            lo[0] = 1.0;
                            hi[0] = -1.0;
                        }
                    }
                }
                1 => {
                    let (i, v) = (r.idx[0], r.val[0]);
                    if v > 0.0 {
                        hi[i] = hi[i].min(b / v);
                    } else {
                        lo[i] = lo[i].max(b / v);
                    }
                }
                _ => return None,
            }
        }
        Some((lo, hi))
    }

    /// `max { c . x | x in set }`; `None` when the set is empty, `+inf` when
    /// unbounded in direction `c`.
    pub fn support(&self, c: &DVector<f64>) -> Result<Option<f64>> {
        if c.len() != self.dim {
            return Err(Error::Dimension("support direction has wrong length".into()));
        }
        if let Some((lo, hi)) = self.coordinate_bounds() {
            if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
                return Ok(None);
            }
            let mut total = 0.0;
            for i in 0..self.dim {
                let ci = c[i];
                if ci > 0.0 {
                    total += ci * hi[i];
                } else if ci < 0.0 {
                    total += ci * lo[i];
                }
            }
            return Ok(Some(if total.is_nan() { f64::INFINITY } else { total }));
        }
        let lp = LpProblem::new(c.clone(), self.dense_matrix(), self.b.clone());
        let sol = solve_lp(&lp)?;
        match sol.status {
            LpStatus::Optimal => Ok(Some(sol.objective)),
            LpStatus::Unbounded => Ok(Some(f64::INFINITY)),
            LpStatus::Infeasible => Ok(None),
            LpStatus::MaxIter => Err(Error::Numerical("support LP hit the pivot limit".into())),
        }
    }
}

/// Condensed prediction `X = Phi x + Gamma U` over `horizon` steps.
///
/// `Phi` is never stored: at the state dimensions this crate targets it is the
/// largest object in the problem, and the free response `Phi x` is produced by
/// iterating `A` instead.
#[derive(Debug, Clone)]
pub struct PredictionMatrices {
    a: DMatrix<f64>,
    gamma: DMatrix<f64>,
    horizon: usize,
    n: usize,
    m: usize,
}

pub fn build_prediction(sys: &LtiSystem, horizon: usize) -> Result<PredictionMatrices> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("prediction horizon must be at least 1".into()));
    }
    let (n, m) = (sys.state_dim(), sys.input_dim());
    // A^k B for k = 0..horizon-1
    let mut powers = Vec::with_capacity(horizon);
    powers.push(sys.b().clone());
    for k in 1..horizon {
        let next = sys.a() * &powers[k - 1];
        powers.push(next);
    }
    let mut gamma = DMatrix::zeros(horizon * n, horizon * m);
    for i in 0..horizon {
        for j in 0..=i {
            gamma
                .view_mut((i * n, j * m), (n, m))
                .copy_from(&powers[i - j]);
        }
    }
    Ok(PredictionMatrices {
        a: sys.a().clone(),
        gamma,
        horizon,
        n,
        m,
    })
}

impl PredictionMatrices {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// Block row `i` (0-based, predicting `x_{i+1}`) of `Gamma`.
    pub fn gamma_block_row(&self, i: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.gamma.view((i * self.n, 0), (self.n, self.horizon * self.m))
    }

    /// Dense `Phi`, stacking `A, A^2, ..., A^N`.
    pub fn phi(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut phi = DMatrix::zeros(self.horizon * n, n);
        let mut power = self.a.clone();
        for i in 0..self.horizon {
            phi.view_mut((i * n, 0), (n, n)).copy_from(&power);
            if i + 1 < self.horizon {
                power = &self.a * &power;
            }
        }
        phi
    }

    /// Stacked free response `Phi x` = `[A x; A^2 x; ...; A^N x]`.
    pub fn free_response(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut out = DVector::zeros(self.horizon * n);
        let mut cur = x.clone();
        let mut next = DVector::zeros(n);
        for i in 0..self.horizon {
            next.gemv(1.0, &self.a, &cur, 0.0);
            out.rows_mut(i * n, n).copy_from(&next);
            std::mem::swap(&mut cur, &mut next);
        }
        out
    }

    /// Stacked prediction `Phi x + Gamma U`.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut out = self.free_response(x);
        out.gemv(1.0, &self.gamma, u, 1.0);
        out
    }
}
