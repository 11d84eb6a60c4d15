//! Full MPC problem, its condensed QP and the receding-horizon law.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::{build_prediction, LtiSystem, PolyhedralSet, PredictionMatrices};
use crate::solvers::{cholesky_lower, solve_lower, solve_qp, QpProblem, QpSolution, QpStatus};

const INVARIANCE_TOL: f64 = 1e-9;

/// Quadratic-cost MPC with polyhedral state, input and terminal constraints.
///
/// Cost: `sum_{i<N} (x_i-xr)'Q(x_i-xr) + (u_i-ur)'R(u_i-ur) + (x_N-xr)'P(x_N-xr)`.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub sys: LtiSystem,
    pub xset: PolyhedralSet,
    pub uset: PolyhedralSet,
    pub xterm: PolyhedralSet,
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub xref: DVector<f64>,
    pub uref: DVector<f64>,
    pub kaux: DMatrix<f64>,
}

pub struct MpcProblemBuilder {
    sys: LtiSystem,
    xset: PolyhedralSet,
    uset: PolyhedralSet,
    xterm: PolyhedralSet,
    horizon: usize,
    q: Option<DMatrix<f64>>,
    r: Option<DMatrix<f64>>,
    p: Option<DMatrix<f64>>,
    xref: Option<DVector<f64>>,
    uref: Option<DVector<f64>>,
    kaux: Option<DMatrix<f64>>,
}

impl MpcProblemBuilder {
    pub fn weights(mut self, q: DMatrix<f64>, r: DMatrix<f64>, p: DMatrix<f64>) -> Self {
        self.q = Some(q);
        self.r = Some(r);
        self.p = Some(p);
        self
    }

    pub fn reference(mut self, xref: DVector<f64>, uref: DVector<f64>) -> Self {
        self.xref = Some(xref);
        self.uref = Some(uref);
        self
    }

    pub fn auxiliary_gain(mut self, k: DMatrix<f64>) -> Self {
        self.kaux = Some(k);
        self
    }

    /// Builds and checks every invariant, including terminal invariance.
    pub fn build(self) -> Result<MpcProblem> {
        let p = self.build_unchecked()?;
        p.validate()?;
        Ok(p)
    }

    /// Builds with shape checks only; set-inclusion checks are skipped.
    pub fn build_unchecked(self) -> Result<MpcProblem> {
        let n = self.sys.state_dim();
        let m = self.sys.input_dim();
        let q = self.q.unwrap_or_else(|| DMatrix::identity(n, n));
        let p = self.p.unwrap_or_else(|| q.clone());
        let prob = MpcProblem {
            q,
            r: self.r.unwrap_or_else(|| DMatrix::identity(m, m)),
            p,
            xref: self.xref.unwrap_or_else(|| DVector::zeros(n)),
            uref: self.uref.unwrap_or_else(|| DVector::zeros(m)),
            kaux: self.kaux.unwrap_or_else(|| DMatrix::zeros(m, n)),
            sys: self.sys,
            xset: self.xset,
            uset: self.uset,
            xterm: self.xterm,
            horizon: self.horizon,
        };
        prob.check_shapes()?;
        Ok(prob)
    }
}

impl MpcProblem {
    pub fn builder(
        sys: LtiSystem,
        xset: PolyhedralSet,
        uset: PolyhedralSet,
        xterm: PolyhedralSet,
        horizon: usize,
    ) -> MpcProblemBuilder {
        MpcProblemBuilder {
            sys,
            xset,
            uset,
            xterm,
            horizon,
            q: None,
            r: None,
            p: None,
            xref: None,
            uref: None,
            kaux: None,
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let n = self.sys.state_dim();
        let m = self.sys.input_dim();
        let square = |name: &str, w: &DMatrix<f64>, d: usize| {
            if w.nrows() != d || w.ncols() != d {
                Err(Error::Dimension(format!("{name} is {}x{}, expected {d}x{d}", w.nrows(), w.ncols())))
            } else {
                Ok(())
            }
        };
        square("Q", &self.q, n)?;
        square("P", &self.p, n)?;
        square("R", &self.r, m)?;
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if self.xset.dim() != n || self.xterm.dim() != n || self.uset.dim() != m {
            return Err(Error::Dimension("constraint set dimensions do not match the system".into()));
        }
        if self.xref.len() != n || self.uref.len() != m {
            return Err(Error::Dimension("reference dimensions do not match the system".into()));
        }
        if self.kaux.nrows() != m || self.kaux.ncols() != n {
            return Err(Error::Dimension("auxiliary gain must be m x n".into()));
        }
        for (name, w) in [("Q", &self.q), ("R", &self.r), ("P", &self.p)] {
            let asym = (w - w.transpose()).amax();
            if asym > 1e-12 * w.amax().max(f64::MIN_POSITIVE) {
                return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
            }
            if !positive_definite(w) {
                return Err(Error::InvalidArgument(format!("{name} is not positive definite")));
            }
        }
        Ok(())
    }

    /// Terminal set inside the state set, invariant under `u = K x`, and
    /// mapped into the input set by `K`.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        let n = self.sys.state_dim();
        for (j, row) in self.xset.rows().iter().enumerate() {
            let c = row.to_dense(n);
            match self.xterm.support(&c)? {
                None => return Err(Error::InvalidArgument("terminal set is empty".into())),
                Some(s) if s > self.xset.rhs()[j] + INVARIANCE_TOL * (1.0 + s.abs()) => {
                    return Err(Error::InvalidArgument(format!(
                        "terminal set leaves the state set along row {j} ({s} > {})",
                        self.xset.rhs()[j]
                    )))
                }
                _ => {}
            }
        }
        let closed = self.sys.a() + self.sys.b() * &self.kaux;
        for (j, row) in self.xterm.rows().iter().enumerate() {
            let mut dir = DVector::zeros(n);
            for (&k, &v) in row.idx.iter().zip(&row.val) {
                dir.axpy(v, &closed.row(k).transpose(), 1.0);
            }
            if let Some(s) = self.xterm.support(&dir)? {
                let b = self.xterm.rhs()[j];
                if s > b + INVARIANCE_TOL * (1.0 + b.abs()) {
                    return Err(Error::InvalidArgument(format!(
                        "terminal set is not invariant under the auxiliary law (row {j}: {s} > {b})"
                    )));
                }
            }
        }
        for (j, row) in self.uset.rows().iter().enumerate() {
            let mut dir = DVector::zeros(n);
            for (&k, &v) in row.idx.iter().zip(&row.val) {
                dir.axpy(v, &self.kaux.row(k).transpose(), 1.0);
            }
            if let Some(s) = self.xterm.support(&dir)? {
                let b = self.uset.rhs()[j];
                if s > b + INVARIANCE_TOL * (1.0 + b.abs()) {
                    return Err(Error::InvalidArgument(format!(
                        "auxiliary law leaves the input set on the terminal set (row {j})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Direct stage-by-stage cost evaluation.
    pub fn stagewise_cost(&self, x0: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let m = self.sys.input_dim();
        let mut x = x0.clone();
        let mut total = 0.0;
        for i in 0..self.horizon {
            let ui = u.rows(i * m, m).clone_owned();
            let dx = &x - &self.xref;
            let du = &ui - &self.uref;
            total += dx.dot(&(&self.q * &dx)) + du.dot(&(&self.r * &du));
            x = self.sys.simulate_step(&x, &ui)?;
        }
        let dx = &x - &self.xref;
        Ok(total + dx.dot(&(&self.p * &dx)))
    }
}

/// Which constraint a stacked state row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowTag {
    /// Prediction step `i` in `1..=N`.
    pub step: usize,
    /// Row index within the state set (`step < N`) or terminal set (`step == N`).
    pub index: usize,
}

/// The MPC problem condensed onto the input sequence:
/// `J(x, U) = 1/2 U' G G' U + f(x)' U + c(x)` with every state constraint
/// `c_j x_i <= b_j` rewritten as `c_j Gamma_i U <= b_j - c_j A^i x`.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    problem: MpcProblem,
    pred: PredictionMatrices,
    h: DMatrix<f64>,
    g: DMatrix<f64>,
    /// `Qbar Gamma`, used for the state-dependent linear cost.
    weighted_gamma: DMatrix<f64>,
    f_offset: DVector<f64>,
    /// `2 (Qbar Gamma)' Phi`, so that `f(x) = fmap x + f_offset`.
    fmap: DMatrix<f64>,
    state_rows: DMatrix<f64>,
    /// Column `k` is stacked row `k`, for contiguous per-row products.
    state_rows_t: DMatrix<f64>,
    tags: Vec<RowTag>,
    /// Original sparse rows `c_j` of every stacked row, in CSR form.
    row_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    row_val: Vec<f64>,
    row_rhs: Vec<f64>,
    step_offsets: Vec<usize>,
    /// `|| G^{-1} c_hat^T ||_2` per stacked state row.
    row_gnorm: Vec<f64>,
    input_rows: DMatrix<f64>,
    input_rhs: DVector<f64>,
}

fn positive_definite(w: &DMatrix<f64>) -> bool {
    let n = w.nrows();
    let diagonal = (0..n).all(|j| (0..n).all(|i| i == j || w[(i, j)] == 0.0));
    if diagonal {
        w.diagonal().iter().all(|&d| d > 0.0)
    } else {
        cholesky_lower(w).is_ok()
    }
}

pub fn condense(p: &MpcProblem) -> Result<CondensedQp> {
    CondensedQp::new(p.clone())
}

impl CondensedQp {
    pub fn new(problem: MpcProblem) -> Result<Self> {
        problem.check_shapes()?;
        let n = problem.sys.state_dim();
        let m = problem.sys.input_dim();
        let big_n = problem.horizon;
        let nm = big_n * m;
        let pred = build_prediction(&problem.sys, big_n)?;
        let gamma = pred.gamma();

        let mut weighted_gamma = DMatrix::zeros(big_n * n, nm);
        for i in 0..big_n {
            let w = if i + 1 == big_n { &problem.p } else { &problem.q };
            let blk = gamma.view((i * n, 0), (n, nm));
            weighted_gamma.view_mut((i * n, 0), (n, nm)).copy_from(&(w * blk));
        }
        let mut h = gamma.transpose() * &weighted_gamma;
        for i in 0..big_n {
            let mut blk = h.view_mut((i * m, i * m), (m, m));
            blk += &problem.r;
        }
        h *= 2.0;
        h = (&h + h.transpose()) * 0.5;
        let g = cholesky_lower(&h).map_err(|e| {
            Error::InvalidArgument(format!("condensed Hessian is not positive definite: {e}"))
        })?;

        let xr_stack = DVector::from_fn(big_n * n, |k, _| problem.xref[k % n]);
        let ur_stack = DVector::from_fn(nm, |k, _| problem.uref[k % m]);
        let mut rbar_ur = DVector::zeros(nm);
        for i in 0..big_n {
            rbar_ur
                .rows_mut(i * m, m)
                .copy_from(&(&problem.r * ur_stack.rows(i * m, m)));
        }
        let f_offset = -(weighted_gamma.transpose() * &xr_stack) * 2.0 - rbar_ur * 2.0;

        // Horner on the transpose: sum_i (A^{i+1})' W_i
        let at = problem.sys.a().transpose();
        let mut acc = weighted_gamma.rows((big_n - 1) * n, n).clone_owned();
        for i in (0..big_n - 1).rev() {
            acc = &at * acc + weighted_gamma.rows(i * n, n);
        }
        let fmap = (&at * acc).transpose() * 2.0;

        let nx = problem.xset.len();
        let nt = problem.xterm.len();
        let total = (big_n - 1) * nx + nt;
        let mut state_rows = DMatrix::zeros(total, nm);
        let mut tags = Vec::with_capacity(total);
        let mut row_ptr = Vec::with_capacity(total + 1);
        let mut row_idx = Vec::new();
        let mut row_val = Vec::new();
        let mut row_rhs = Vec::with_capacity(total);
        row_ptr.push(0);
        let mut step_offsets = Vec::with_capacity(big_n + 1);
        let mut k = 0;
        for step in 1..=big_n {
            step_offsets.push(k);
            let set = if step < big_n { &problem.xset } else { &problem.xterm };
            let blk = gamma.view(((step - 1) * n, 0), (n, nm));
            for (j, row) in set.rows().iter().enumerate() {
                for (&col, &v) in row.idx.iter().zip(&row.val) {
                    for c in 0..nm {
                        state_rows[(k, c)] += v * blk[(col, c)];
                    }
                }
                tags.push(RowTag { step, index: j });
                row_idx.extend_from_slice(&row.idx);
                row_val.extend_from_slice(&row.val);
                row_ptr.push(row_idx.len());
                row_rhs.push(set.rhs()[j]);
                k += 1;
            }
        }
        step_offsets.push(k);

        let row_gnorm = (0..total)
            .map(|r| solve_lower(&g, &state_rows.row(r).transpose()).norm())
            .collect();

        let nu = problem.uset.len();
        let mut input_rows = DMatrix::zeros(big_n * nu, nm);
        let mut input_rhs = DVector::zeros(big_n * nu);
        for i in 0..big_n {
            for (j, row) in problem.uset.rows().iter().enumerate() {
                for (&col, &v) in row.idx.iter().zip(&row.val) {
                    input_rows[(i * nu + j, i * m + col)] = v;
                }
                input_rhs[i * nu + j] = problem.uset.rhs()[j];
            }
        }

        Ok(Self {
            problem,
            pred,
            h,
            g,
            weighted_gamma,
            f_offset,
            fmap,
            state_rows_t: state_rows.transpose(),
            state_rows,
            tags,
            row_ptr,
            row_idx,
            row_val,
            row_rhs,
            step_offsets,
            row_gnorm,
            input_rows,
            input_rhs,
        })
    }

    pub fn problem(&self) -> &MpcProblem {
        &self.problem
    }

    pub fn prediction(&self) -> &PredictionMatrices {
        &self.pred
    }

    pub fn horizon(&self) -> usize {
        self.problem.horizon
    }

    pub fn num_inputs(&self) -> usize {
        self.problem.horizon * self.problem.sys.input_dim()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Lower Cholesky factor `G` of the Hessian.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn state_rows(&self) -> &DMatrix<f64> {
        &self.state_rows
    }

    /// `c_hat_k . u` for stacked row `k`.
    pub fn state_row_dot(&self, k: usize, u: &DVector<f64>) -> f64 {
        self.state_rows_t.column(k).dot(u)
    }

    pub fn tags(&self) -> &[RowTag] {
        &self.tags
    }

    pub fn num_state_rows(&self) -> usize {
        self.tags.len()
    }

    /// Stacked-row range for prediction step `i` in `1..=N`.
    pub fn step_range(&self, step: usize) -> std::ops::Range<usize> {
        self.step_offsets[step - 1]..self.step_offsets[step]
    }

    pub fn row_gnorm(&self, row: usize) -> f64 {
        self.row_gnorm[row]
    }

    pub fn input_rows(&self) -> &DMatrix<f64> {
        &self.input_rows
    }

    pub fn input_rhs(&self) -> &DVector<f64> {
        &self.input_rhs
    }

    pub fn free_response(&self, x: &DVector<f64>) -> DVector<f64> {
        self.pred.free_response(x)
    }

    /// `f(x)` from the free response `Phi x`.
    pub fn linear_cost(&self, free: &DVector<f64>) -> DVector<f64> {
        let mut f = self.f_offset.clone();
        f.gemv_tr(2.0, &self.weighted_gamma, free, 1.0);
        f
    }

    /// `f(x)` directly from the state.
    pub fn linear_cost_state(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut f = self.f_offset.clone();
        f.gemv(1.0, &self.fmap, x, 1.0);
        f
    }

    /// `c(x)`, the input-independent part of the cost.
    pub fn constant_cost(&self, x: &DVector<f64>, free: &DVector<f64>) -> f64 {
        let p = &self.problem;
        let n = p.sys.state_dim();
        let dx0 = x - &p.xref;
        let mut c = dx0.dot(&(&p.q * &dx0));
        for i in 0..p.horizon {
            let w = if i + 1 == p.horizon { &p.p } else { &p.q };
            let d = free.rows(i * n, n) - &p.xref;
            c += d.dot(&(w * &d));
        }
        for _ in 0..p.horizon {
            c += p.uref.dot(&(&p.r * &p.uref));
        }
        c
    }

    /// Condensed objective `1/2 U'HU + f(x)'U + c(x)`.
    pub fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let free = self.free_response(x);
        0.5 * u.dot(&(&self.h * u)) + self.linear_cost(&free).dot(u) + self.constant_cost(x, &free)
    }

    /// `b_hat(x)` for every stacked state row, from the free response.
    pub fn state_offsets(&self, free: &DVector<f64>) -> DVector<f64> {
        let n = self.problem.sys.state_dim();
        DVector::from_fn(self.tags.len(), |k, _| self.state_offset(k, free, n))
    }

    pub fn state_offset(&self, k: usize, free: &DVector<f64>, n: usize) -> f64 {
        let step = self.tags[k].step;
        let blk = &free.as_slice()[(step - 1) * n..step * n];
        let (idx, val, b) = self.stacked_row(k);
        b - idx.iter().zip(val).map(|(&i, &v)| v * blk[i]).sum::<f64>()
    }

    /// Sparse `c_j` and `b_j` behind stacked row `k`.
    pub fn stacked_row(&self, k: usize) -> (&[usize], &[f64], f64) {
        let r = self.row_ptr[k]..self.row_ptr[k + 1];
        (&self.row_idx[r.clone()], &self.row_val[r], self.row_rhs[k])
    }

    /// The full QP at state `x`.
    pub fn full_qp(&self, x: &DVector<f64>) -> Result<QpProblem> {
        let free = self.free_response(x);
        self.full_qp_from_free(&free)
    }

    pub fn full_qp_from_free(&self, free: &DVector<f64>) -> Result<QpProblem> {
        let ns = self.tags.len();
        let ni = self.input_rhs.len();
        let nm = self.num_inputs();
        let mut a = DMatrix::zeros(ns + ni, nm);
        a.rows_mut(0, ns).copy_from(&self.state_rows);
        a.rows_mut(ns, ni).copy_from(&self.input_rows);
        let mut b = DVector::zeros(ns + ni);
        b.rows_mut(0, ns).copy_from(&self.state_offsets(free));
        b.rows_mut(ns, ni).copy_from(&self.input_rhs);
        QpProblem::with_factor(self.h.clone(), self.g.clone(), self.linear_cost(free), a, b)
    }

    /// Largest violation of the stacked constraints by `u` at state `x`
    /// (non-positive when feasible).
    pub fn max_violation(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.max_violation_from_free(&self.free_response(x), u)
    }

    pub fn max_violation_from_free(&self, free: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let state = &self.state_rows * u - self.state_offsets(free);
        let input = &self.input_rows * u - &self.input_rhs;
        state.iter().chain(input.iter()).copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rolls out the auxiliary law from `x` over the horizon.
    pub fn auxiliary_rollout(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let p = &self.problem;
        let m = p.sys.input_dim();
        let mut u = DVector::zeros(self.num_inputs());
        let mut state = x.clone();
        for i in 0..p.horizon {
            let ui = &p.kaux * &state;
            state = p.sys.simulate_step(&state, &ui)?;
            u.rows_mut(i * m, m).copy_from(&ui);
        }
        Ok(u)
    }

    pub fn solve_full(&self, x: &DVector<f64>, warm: Option<&DVector<f64>>, tol_kkt: f64) -> Result<QpSolution> {
        if x.len() != self.problem.sys.state_dim() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("state must be finite with the system dimension".into()));
        }
        let qp = self.full_qp(x)?;
        solve_qp(&qp, warm, tol_kkt)
    }

    /// Receding-horizon law: first input block and the full optimal sequence.
    pub fn mpc_law(
        &self,
        x: &DVector<f64>,
        warm: Option<&DVector<f64>>,
        tol_kkt: f64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let sol = self.solve_full(x, warm, tol_kkt)?;
        match sol.status {
            QpStatus::Optimal => {
                let m = self.problem.sys.input_dim();
                Ok((sol.ustar.rows(0, m).clone_owned(), sol.ustar))
            }
            QpStatus::Infeasible => Err(Error::Infeasible("state is outside the feasible set".into())),
            QpStatus::MaxIter => Err(Error::Numerical("QP iteration limit reached".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::DEFAULT_TOL_KKT;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_problem(horizon: usize) -> MpcProblem {
        let sys = LtiSystem::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let unit = |lo: f64, hi: f64| PolyhedralSet::bounds(&DVector::from_element(1, lo), &DVector::from_element(1, hi));
        MpcProblem::builder(sys, unit(-10.0, 10.0), unit(-1.0, 1.0), unit(-10.0, 10.0), horizon)
            .build_unchecked()
            .unwrap()
    }

    #[test]
    fn scalar_condensed_terms() {
        // J = (x0+u)^2 + u^2 + x0^2 = 1/2 * 4 u^2 + 2 x0 u + 2 x0^2
        let cq = condense(&scalar_problem(1)).unwrap();
        assert!((cq.hessian()[(0, 0)] - 4.0).abs() < 1e-14);
        let x = DVector::from_element(1, 0.7);
        let f = cq.linear_cost(&cq.free_response(&x));
        assert!((f[0] - 1.4).abs() < 1e-14);
        let zero = DVector::zeros(1);
        assert_eq!(cq.linear_cost(&cq.free_response(&zero))[0], 0.0);
        assert_eq!(cq.constant_cost(&zero, &cq.free_response(&zero)), 0.0);
    }

    #[test]
    fn state_linear_cost_matches_free_response_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let cq = condense(&random_problem(&mut rng)).unwrap();
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let d = cq.linear_cost_state(&x) - cq.linear_cost(&cq.free_response(&x));
            assert!(d.amax() < 1e-12);
        }
    }

    #[test]
    fn scalar_solutions() {
        let cq = condense(&scalar_problem(1)).unwrap();
        let (u0, _) = cq.mpc_law(&DVector::zeros(1), None, DEFAULT_TOL_KKT).unwrap();
        assert!(u0[0].abs() < 1e-14);
        // unconstrained minimiser of 2u^2 + 2u is -1/2
        let sol = cq.solve_full(&DVector::from_element(1, 1.0), None, DEFAULT_TOL_KKT).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.ustar[0] + 0.5).abs() < 1e-12);
        assert!(sol.kkt.max() <= DEFAULT_TOL_KKT);
        // x = 5 wants u = -2.5 but |u| <= 1
        let sol = cq.solve_full(&DVector::from_element(1, 5.0), None, DEFAULT_TOL_KKT).unwrap();
        assert!((sol.ustar[0] + 1.0).abs() < 1e-12);
        assert!((sol.lambda.sum() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_state_reported() {
        let cq = condense(&scalar_problem(1)).unwrap();
        // x1 = 20 + u >= 19 > 10
        let sol = cq.solve_full(&DVector::from_element(1, 20.0), None, DEFAULT_TOL_KKT).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        assert!(matches!(
            cq.mpc_law(&DVector::from_element(1, 20.0), None, DEFAULT_TOL_KKT),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn zero_input_weight_rejected() {
        let sys = LtiSystem::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        let s = PolyhedralSet::upper_bounds(&DVector::from_element(1, 1.0));
        let res = MpcProblem::builder(sys, s.clone(), s.clone(), s, 2)
            .weights(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), DMatrix::identity(1, 1))
            .build_unchecked();
        assert!(res.is_err());
    }

    #[test]
    fn terminal_checks() {
        let sys = LtiSystem::new(DMatrix::from_element(1, 1, 0.5), DMatrix::identity(1, 1)).unwrap();
        let b = |lo: f64, hi: f64| PolyhedralSet::bounds(&DVector::from_element(1, lo), &DVector::from_element(1, hi));
        assert!(MpcProblem::builder(sys.clone(), b(-2.0, 2.0), b(-1.0, 1.0), b(-1.0, 1.0), 3).build().is_ok());
        // not inside the state set
        assert!(MpcProblem::builder(sys.clone(), b(-2.0, 2.0), b(-1.0, 1.0), b(-3.0, 3.0), 3).build().is_err());
        // unstable closed loop under K = 0
        let unstable = LtiSystem::new(DMatrix::from_element(1, 1, 1.5), DMatrix::identity(1, 1)).unwrap();
        assert!(MpcProblem::builder(unstable.clone(), b(-2.0, 2.0), b(-1.0, 1.0), b(-1.0, 1.0), 3).build().is_err());
        // K = -1 makes it invariant, but needs |x| <= 1 inside the input set
        let ok = MpcProblem::builder(unstable.clone(), b(-2.0, 2.0), b(-1.0, 1.0), b(-1.0, 1.0), 3)
            .auxiliary_gain(DMatrix::from_element(1, 1, -1.0))
            .build();
        assert!(ok.is_ok());
        let bad_input = MpcProblem::builder(unstable, b(-2.0, 2.0), b(-0.5, 0.5), b(-1.0, 1.0), 3)
            .auxiliary_gain(DMatrix::from_element(1, 1, -1.0))
            .build();
        assert!(bad_input.is_err());
    }

    fn random_problem(rng: &mut ChaCha8Rng) -> MpcProblem {
        let (n, m, horizon) = (3, 2, 4);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let sys = LtiSystem::new(a, b).unwrap();
        let c = DMatrix::from_fn(5, n, |_, _| rng.random_range(-1.0..1.0));
        let xset = PolyhedralSet::from_dense(&c, DVector::from_element(5, 3.0)).unwrap();
        let ct = DMatrix::from_fn(4, n, |_, _| rng.random_range(-1.0..1.0));
        let xterm = PolyhedralSet::from_dense(&ct, DVector::from_element(4, 1.0)).unwrap();
        let uset = PolyhedralSet::bounds(&DVector::from_element(m, -1.0), &DVector::from_element(m, 1.0));
        let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q = &l * l.transpose() + DMatrix::identity(n, n);
        MpcProblem::builder(sys, xset, uset, xterm, horizon)
            .weights(q.clone(), DMatrix::identity(m, m) * 0.5, q * 2.0)
            .reference(
                DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
                DVector::from_fn(m, |_, _| rng.random_range(-0.5..0.5)),
            )
            .build_unchecked()
            .unwrap()
    }

    #[test]
    fn condensed_cost_matches_stagewise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let p = random_problem(&mut rng);
            let cq = condense(&p).unwrap();
            for _ in 0..100 {
                let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
                let u = DVector::from_fn(cq.num_inputs(), |_, _| rng.random_range(-2.0..2.0));
                let direct = p.stagewise_cost(&x, &u).unwrap();
                let cond = cq.cost(&x, &u);
                assert!((direct - cond).abs() <= 1e-8 * direct.abs().max(1.0), "{direct} vs {cond}");
            }
        }
    }

    #[test]
    fn stacked_rows_evaluate_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = random_problem(&mut rng);
        let cq = condense(&p).unwrap();
        let n = 3;
        let x = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let u = DVector::from_fn(cq.num_inputs(), |_, _| rng.random_range(-2.0..2.0));
        let traj = cq.prediction().predict(&x, &u);
        let free = cq.free_response(&x);
        let lhs = cq.state_rows() * &u - cq.state_offsets(&free);
        for (k, tag) in cq.tags().iter().enumerate() {
            let set = if tag.step < p.horizon { &p.xset } else { &p.xterm };
            let xi = &traj.as_slice()[(tag.step - 1) * n..tag.step * n];
            let direct = set.row(tag.index).dot(xi) - set.rhs()[tag.index];
            assert!((lhs[k] - direct).abs() < 1e-12);
        }
        assert_eq!(cq.num_state_rows(), 3 * 5 + 4);
        assert_eq!(cq.step_range(4), 15..19);
        // every (step, row) appears exactly once
        let mut seen = std::collections::HashSet::new();
        assert!(cq.tags().iter().all(|t| seen.insert((t.step, t.index))));
        let input_lhs = cq.input_rows() * &u - cq.input_rhs();
        for i in 0..p.horizon {
            for j in 0..2 {
                let ui = u[i * 2 + j];
                assert!((input_lhs[i * 4 + 2 * j] - (ui - 1.0)).abs() < 1e-15);
                assert!((input_lhs[i * 4 + 2 * j + 1] - (-ui - 1.0)).abs() < 1e-15);
            }
        }
    }
}
