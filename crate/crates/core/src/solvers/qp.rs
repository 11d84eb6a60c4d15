//! Dense primal active-set solver for strictly convex QPs
//! `min 1/2 u^T H u + f^T u  s.t.  A u <= b`.
//!
//! Equality-constrained subproblems are solved in the variables `z = G^T p`
//! (with `H = G G^T`), where the working-set normals become `G^{-1} a_i^T`
//! and the step is the projection of the scaled gradient onto their
//! orthogonal complement. The Cholesky factor is computed once per problem.

use nalgebra::{DMatrix, DVector};

use super::cholesky::{cholesky_lower, solve_lower, solve_lower_transpose};
use super::lp::{solve_lp, LpProblem, LpStatus};
use crate::error::{Error, Result};

pub const DEFAULT_TOL_KKT: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct QpProblem {
    h: DMatrix<f64>,
    g: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    pub min_multiplier: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(-self.min_multiplier)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Minimizer; empty when `status` is `Infeasible`.
    pub ustar: DVector<f64>,
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt: KktResiduals,
}

impl QpProblem {
    /// Validates symmetry and positive definiteness of `h` and the shapes.
    pub fn new(h: DMatrix<f64>, f: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let g = factor_checked(&h)?;
        Self::with_factor(h, g, f, a, b)
    }

    /// Same as [`QpProblem::new`] with a precomputed lower Cholesky factor.
    pub fn with_factor(
        h: DMatrix<f64>,
        g: DMatrix<f64>,
        f: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self> {
        let n = h.nrows();
        if g.nrows() != n || g.ncols() != n || f.len() != n {
            return Err(Error::Dimension("QP cost dimensions disagree".into()));
        }
        if a.nrows() != b.len() || (a.ncols() != n && a.nrows() > 0) {
            return Err(Error::Dimension(format!(
                "QP constraints are {}x{} with rhs {} for {} variables",
                a.nrows(),
                a.ncols(),
                b.len(),
                n
            )));
        }
        let a = if a.nrows() == 0 { DMatrix::zeros(0, n) } else { a };
        Ok(Self { h, g, f, a, b })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.b.len()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.f.dot(u)
    }

    pub fn kkt_residuals(&self, u: &DVector<f64>, lambda: &DVector<f64>) -> KktResiduals {
        let grad = &self.h * u + &self.f + self.a.transpose() * lambda;
        let slack = &self.b - &self.a * u;
        let primal = slack.iter().fold(0.0f64, |m, &s| m.max(-s));
        let complementarity = slack
            .iter()
            .zip(lambda.iter())
            .fold(0.0f64, |m, (s, l)| m.max((s * l).abs()));
        KktResiduals {
            stationarity: grad.amax(),
            primal,
            complementarity,
            min_multiplier: lambda.iter().copied().fold(0.0, f64::min),
        }
    }
}

fn factor_checked(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if h.nrows() != h.ncols() {
        return Err(Error::Dimension("QP Hessian is not square".into()));
    }
    let scale = h.amax().max(f64::MIN_POSITIVE);
    let asym = (h - h.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(Error::InvalidArgument(format!(
            "QP Hessian is not symmetric (max asymmetry {asym:e})"
        )));
    }
    cholesky_lower(h)
}

/// Solves the QP from `warm` when it is feasible, otherwise from a vertex
/// found by an LP feasibility phase.
pub fn solve_qp(p: &QpProblem, warm: Option<&DVector<f64>>, tol_kkt: f64) -> Result<QpSolution> {
    let n = p.dim();
    let q = p.num_constraints();
    if let Some(w) = warm {
        if w.len() != n {
            return Err(Error::Dimension(format!("warm start has length {}, expected {n}", w.len())));
        }
    }

    let start = match warm {
        Some(w) if max_violation(p, w) <= tol_kkt => Some(w.clone()),
        _ => feasible_point(p)?,
    };
    let Some(mut x) = start else {
        return Ok(QpSolution {
            ustar: DVector::zeros(0),
            lambda: DVector::zeros(q),
            status: QpStatus::Infeasible,
            iterations: 0,
            kkt: KktResiduals::default(),
        });
    };

    let mut slack = &p.b - &p.a * &x;
    let mut in_working = vec![false; q];
    let mut working: Vec<usize> = Vec::new();
    // Columns G^{-1} a_i^T of the working set, in working-set order.
    let mut normals: Vec<DVector<f64>> = Vec::new();
    let max_iter = 50 * (n + q);
    let mut iterations = 0;
    let mut multipliers = DVector::zeros(0);

    let status = loop {
        if iterations >= max_iter {
            break QpStatus::MaxIter;
        }
        iterations += 1;

        let grad = p.hessian() * &x + &p.f;
        let gbar = solve_lower(p.factor(), &grad);
        let (z, lam) = project(&normals, &gbar, n);
        let step = solve_lower_transpose(p.factor(), &z);
        let xscale = 1.0 + x.amax();

        if step.amax() <= 1e-13 * xscale {
            multipliers = lam;
            let (worst, min_lam) = multipliers
                .iter()
                .enumerate()
                .fold((usize::MAX, 0.0), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
            if worst == usize::MAX || min_lam >= -0.1 * tol_kkt {
                break QpStatus::Optimal;
            }
            in_working[working[worst]] = false;
            working.remove(worst);
            normals.remove(worst);
            continue;
        }

        let ap = &p.a * &step;
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..q {
            if in_working[i] {
                continue;
            }
            let rate = ap[i];
            if rate <= 1e-14 * (1.0 + p.b[i].abs()) {
                continue;
            }
            let limit = slack[i].max(0.0) / rate;
            if limit < alpha {
                alpha = limit;
                blocking = Some(i);
            }
        }
        x.axpy(alpha, &step, 1.0);
        slack.axpy(-alpha, &ap, 1.0);
        if let Some(i) = blocking {
            slack[i] = 0.0;
            in_working[i] = true;
            working.push(i);
            let row: DVector<f64> = p.a.row(i).transpose();
            normals.push(solve_lower(p.factor(), &row));
        }
    };

    let mut lambda = DVector::zeros(q);
    if status == QpStatus::Optimal {
        for (k, &i) in working.iter().enumerate() {
            lambda[i] = multipliers[k].max(0.0);
        }
    }
    let kkt = p.kkt_residuals(&x, &lambda);
    Ok(QpSolution {
        ustar: x,
        lambda,
        status,
        iterations,
        kkt,
    })
}

fn max_violation(p: &QpProblem, u: &DVector<f64>) -> f64 {
    if p.num_constraints() == 0 {
        return 0.0;
    }
    (&p.a * u - &p.b).max()
}

fn feasible_point(p: &QpProblem) -> Result<Option<DVector<f64>>> {
    if p.num_constraints() == 0 {
        return Ok(Some(DVector::zeros(p.dim())));
    }
    let lp = LpProblem::new(DVector::zeros(p.dim()), p.a.clone(), p.b.clone());
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => Ok(Some(sol.x)),
        LpStatus::Infeasible => Ok(None),
        LpStatus::Unbounded => Ok(Some(sol.x)),
        LpStatus::MaxIter => Err(Error::Numerical("QP feasibility phase hit the pivot limit".into())),
    }
}

/// Projects `-gbar` onto the orthogonal complement of the working normals and
/// returns the step together with the least-squares multipliers.
fn project(normals: &[DVector<f64>], gbar: &DVector<f64>, n: usize) -> (DVector<f64>, DVector<f64>) {
    if normals.is_empty() {
        return (-gbar, DVector::zeros(0));
    }
    let v = DMatrix::from_columns(normals);
    let qr = v.clone().qr();
    let qmat = qr.q();
    let r = qr.r();
    let qtg = qmat.transpose() * gbar;
    // lambda = -R^{-1} Q^T gbar
    let w = normals.len();
    let mut lam = DVector::zeros(w);
    for i in (0..w).rev() {
        let mut s = -qtg[i];
        for k in (i + 1)..w {
            s -= r[(i, k)] * lam[k];
        }
        lam[i] = if r[(i, i)].abs() > 1e-300 { s / r[(i, i)] } else { 0.0 };
    }
    let z = -(gbar - &qmat * qtg);
    debug_assert_eq!(z.len(), n);
    (z, lam)
}
