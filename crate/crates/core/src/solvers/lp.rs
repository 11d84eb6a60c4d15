//! Dense bounded-variable simplex on a condensed (dictionary) tableau.
//!
//! Every inequality row gets a slack `s_i = b_i - a_i x` in `[0, inf)`. The
//! dictionary expresses the `m` basic variables as affine functions of the `n`
//! nonbasic ones, so one pivot costs `O(m n)` no matter whether the problem has
//! many more rows than columns or the other way round.
//!
//! Strategy: a primal-feasible start goes straight to primal simplex; a start
//! that is dual feasible for the true objective runs dual simplex; otherwise a
//! composite phase 1 (minimise the sum of infeasibilities) precedes primal
//! simplex. Pricing is Dantzig until a run of degenerate pivots is seen, after
//! which Bland's rule takes over for the rest of the solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-9;
const OPT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
const DEGENERATE_STREAK: usize = 50;

/// `maximize c^T x  s.t.  a x <= b,  lb <= x <= ub`. Missing bound vectors mean
/// the variable is free on that side.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lb: Option<DVector<f64>>,
    pub ub: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: LpStatus,
    pub pivots: usize,
}

impl LpProblem {
    pub fn new(c: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        Self {
            c,
            a,
            b,
            lb: None,
            ub: None,
        }
    }

    pub fn with_bounds(mut self, lb: Option<DVector<f64>>, ub: Option<DVector<f64>>) -> Self {
        self.lb = lb;
        self.ub = ub;
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.c.len();
        if self.a.ncols() != n && self.a.nrows() > 0 {
            return Err(Error::Dimension(format!(
                "LP matrix has {} columns, objective has {}",
                self.a.ncols(),
                n
            )));
        }
        if self.a.nrows() != self.b.len() {
            return Err(Error::Dimension(format!(
                "LP matrix has {} rows, rhs has {}",
                self.a.nrows(),
                self.b.len()
            )));
        }
        for (name, bound) in [("lb", &self.lb), ("ub", &self.ub)] {
            if let Some(v) = bound {
                if v.len() != n {
                    return Err(Error::Dimension(format!("LP {name} has length {}", v.len())));
                }
            }
        }
        Ok(())
    }
}

pub fn solve_lp(p: &LpProblem) -> Result<LpSolution> {
    p.validate()?;
    let mut t = Tableau::new(p);
    let status = t.solve();
    let x = t.structural_values();
    let objective = p.c.dot(&x);
    Ok(LpSolution {
        x,
        objective,
        status,
        pivots: t.pivots,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pricing {
    Dantzig,
    Bland,
}

struct Tableau {
    m: usize,
    n: usize,
    /// Row-major `m x n` dictionary coefficients.
    tab: Vec<f64>,
    d0: Vec<f64>,
    obj: Vec<f64>,
    obj0: f64,
    basis: Vec<usize>,
    nonbasic: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    value: Vec<f64>,
    pivots: usize,
    max_iter: usize,
    pricing: Pricing,
    degenerate_run: usize,
}

impl Tableau {
    fn new(p: &LpProblem) -> Self {
        let n = p.c.len();
        let m = p.b.len();
        let mut lo = vec![f64::NEG_INFINITY; n + m];
        let mut hi = vec![f64::INFINITY; n + m];
        if let Some(lb) = &p.lb {
            lo[..n].copy_from_slice(lb.as_slice());
        }
        if let Some(ub) = &p.ub {
            hi[..n].copy_from_slice(ub.as_slice());
        }
        lo[n..n + m].fill(0.0);
        let mut tab = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                tab[i * n + j] = -p.a[(i, j)];
            }
        }
        let mut value = vec![0.0; n + m];
        for j in 0..n {
            let c = p.c[j];
            value[j] = if c > 0.0 && hi[j].is_finite() {
                hi[j]
            } else if lo[j].is_finite() {
                lo[j]
            } else if hi[j].is_finite() {
                hi[j]
            } else {
                0.0
            };
        }
        let mut t = Tableau {
            m,
            n,
            tab,
            d0: p.b.as_slice().to_vec(),
            obj: p.c.as_slice().to_vec(),
            obj0: 0.0,
            basis: (n..n + m).collect(),
            nonbasic: (0..n).collect(),
            lo,
            hi,
            value,
            pivots: 0,
            max_iter: 50 * (n + m) + 1000,
            pricing: Pricing::Dantzig,
            degenerate_run: 0,
        };
        t.recompute_basic_values();
        t
    }

    fn solve(&mut self) -> Status {
        if !self.primal_feasible() {
            let phase1 = if self.dual_feasible() && self.obj.iter().any(|&c| c != 0.0) {
                self.dual_simplex()
            } else {
                self.phase_one()
            };
            if phase1 != Status::Optimal {
                return phase1;
            }
        }
        self.pricing = Pricing::Dantzig;
        self.degenerate_run = 0;
        let status = self.primal_simplex();
        self.recompute_basic_values();
        status
    }

    fn structural_values(&self) -> DVector<f64> {
        DVector::from_iterator(self.n, self.value[..self.n].iter().copied())
    }

    fn feas_tol(bound: f64) -> f64 {
        FEAS_TOL * (1.0 + bound.abs())
    }

    fn infeasibility(&self, v: usize) -> f64 {
        let x = self.value[v];
        if x < self.lo[v] - Self::feas_tol(self.lo[v]) {
            x - self.lo[v]
        } else if x > self.hi[v] + Self::feas_tol(self.hi[v]) {
            x - self.hi[v]
        } else {
            0.0
        }
    }

    fn primal_feasible(&self) -> bool {
        self.basis.iter().all(|&v| self.infeasibility(v) == 0.0)
    }

    fn dual_feasible(&self) -> bool {
        self.nonbasic.iter().enumerate().all(|(j, &v)| {
            let e = self.obj[j];
            let at_lo = self.value[v] == self.lo[v];
            let at_hi = self.value[v] == self.hi[v];
            (at_lo && e <= OPT_TOL) || (at_hi && e >= -OPT_TOL) || e.abs() <= OPT_TOL
        })
    }

    fn recompute_basic_values(&mut self) {
        for i in 0..self.m {
            let row = &self.tab[i * self.n..(i + 1) * self.n];
            let mut s = self.d0[i];
            for (j, &coef) in row.iter().enumerate() {
                s += coef * self.value[self.nonbasic[j]];
            }
            self.value[self.basis[i]] = s;
        }
    }

    /// Moves nonbasic column `s` by `delta`, updating the basic values.
    fn shift_nonbasic(&mut self, s: usize, delta: f64) {
        if delta == 0.0 {
            return;
        }
        let v = self.nonbasic[s];
        self.value[v] += delta;
        for i in 0..self.m {
            let coef = self.tab[i * self.n + s];
            if coef != 0.0 {
                self.value[self.basis[i]] += coef * delta;
            }
        }
    }

    fn pivot(&mut self, r: usize, s: usize) {
        let n = self.n;
        let p = self.tab[r * n + s];
        let mut new_row: Vec<f64> = self.tab[r * n..(r + 1) * n].iter().map(|&t| -t / p).collect();
        new_row[s] = 1.0 / p;
        let new_d0 = -self.d0[r] / p;
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.tab[i * n + s];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.tab[i * n..(i + 1) * n];
            for (t, &nr) in row.iter_mut().zip(&new_row) {
                *t += f * nr;
            }
            row[s] = f * new_row[s];
            self.d0[i] += f * new_d0;
        }
        let f = self.obj[s];
        if f != 0.0 {
            for (t, &nr) in self.obj.iter_mut().zip(&new_row) {
                *t += f * nr;
            }
            self.obj[s] = f * new_row[s];
            self.obj0 += f * new_d0;
        }
        self.tab[r * n..(r + 1) * n].copy_from_slice(&new_row);
        self.d0[r] = new_d0;
        std::mem::swap(&mut self.basis[r], &mut self.nonbasic[s]);
        self.pivots += 1;
        if self.pivots.is_multiple_of(64) {
            self.recompute_basic_values();
        }
    }

    fn note_step(&mut self, step: f64) {
        if step.abs() <= 1e-12 {
            self.degenerate_run += 1;
            if self.degenerate_run > DEGENERATE_STREAK {
                self.pricing = Pricing::Bland;
            }
        } else {
            self.degenerate_run = 0;
        }
    }

    /// Picks an entering column for the reduced-cost row `costs`; returns the
    /// column and its direction (+1 increase, -1 decrease).
    fn choose_entering(&self, costs: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for (j, &e) in costs.iter().enumerate() {
            let v = self.nonbasic[j];
            let dir = if e > OPT_TOL && self.value[v] < self.hi[v] {
                1.0
            } else if e < -OPT_TOL && self.value[v] > self.lo[v] {
                -1.0
            } else {
                continue;
            };
            let score = match self.pricing {
                Pricing::Dantzig => e.abs(),
                Pricing::Bland => -(v as f64),
            };
            if best.is_none_or(|(_, _, s)| score > s) {
                best = Some((j, dir, score));
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    /// Primal ratio test for entering column `s` moving in `dir`. When
    /// `allow_infeasible` is set, infeasible basics limit the step only once they
    /// reach the bound they violate. Returns `(step, leaving row or None for a
    /// bound flip)`; `None` overall means unbounded.
    fn ratio_test(&self, s: usize, dir: f64, allow_infeasible: bool) -> Option<(f64, Option<usize>)> {
        let v = self.nonbasic[s];
        let mut best_step = self.hi[v] - self.lo[v];
        let mut best_row: Option<usize> = None;
        let mut best_key = f64::NEG_INFINITY;
        if !best_step.is_finite() {
            best_step = f64::INFINITY;
        }
        for i in 0..self.m {
            let rate = self.tab[i * self.n + s] * dir;
            if rate.abs() <= PIVOT_TOL {
                continue;
            }
            let bv = self.basis[i];
            let x = self.value[bv];
            let (lo, hi) = (self.lo[bv], self.hi[bv]);
            let below = x < lo - Self::feas_tol(lo);
            let above = x > hi + Self::feas_tol(hi);
            let limit = if allow_infeasible && below {
                if rate > 0.0 {
                    (lo - x) / rate
                } else {
                    continue;
                }
            } else if allow_infeasible && above {
                if rate < 0.0 {
                    (hi - x) / rate
                } else {
                    continue;
                }
            } else if rate < 0.0 {
                if lo.is_finite() {
                    ((x - lo) / -rate).max(0.0)
                } else {
                    continue;
                }
            } else if hi.is_finite() {
                ((hi - x) / rate).max(0.0)
            } else {
                continue;
            };
            let key = match self.pricing {
                Pricing::Dantzig => rate.abs(),
                Pricing::Bland => -(bv as f64),
            };
            if limit < best_step - 1e-12 || (limit <= best_step + 1e-12 && best_row.is_some() && key > best_key)
            {
                best_step = limit;
                best_row = Some(i);
                best_key = key;
            }
        }
        if best_step.is_infinite() {
            None
        } else {
            Some((best_step, best_row))
        }
    }

    /// Performs the step chosen by the ratio test.
    fn apply_step(&mut self, s: usize, dir: f64, step: f64, row: Option<usize>) {
        self.shift_nonbasic(s, dir * step);
        self.note_step(step);
        match row {
            None => {
                let v = self.nonbasic[s];
                self.value[v] = if dir > 0.0 { self.hi[v] } else { self.lo[v] };
            }
            Some(r) => {
                let leaving = self.basis[r];
                let x = self.value[leaving];
                // Snap the leaving variable onto the bound it reached.
                let snapped = if (x - self.lo[leaving]).abs() <= (x - self.hi[leaving]).abs() {
                    self.lo[leaving]
                } else {
                    self.hi[leaving]
                };
                self.pivot(r, s);
                self.value[leaving] = snapped;
            }
        }
    }

    fn primal_simplex(&mut self) -> Status {
        loop {
            if self.pivots > self.max_iter {
                return Status::MaxIter;
            }
            let costs = self.obj.clone();
            let Some((s, dir)) = self.choose_entering(&costs) else {
                return Status::Optimal;
            };
            match self.ratio_test(s, dir, false) {
                None => return Status::Unbounded,
                Some((step, row)) => self.apply_step(s, dir, step, row),
            }
        }
    }

    fn phase_one(&mut self) -> Status {
        let mut costs = vec![0.0; self.n];
        loop {
            if self.pivots > self.max_iter {
                return Status::MaxIter;
            }
            costs.iter_mut().for_each(|c| *c = 0.0);
            let mut any = false;
            for i in 0..self.m {
                let w = self.infeasibility(self.basis[i]);
                if w == 0.0 {
                    continue;
                }
                any = true;
                let sign = if w < 0.0 { 1.0 } else { -1.0 };
                let row = &self.tab[i * self.n..(i + 1) * self.n];
                for (c, &t) in costs.iter_mut().zip(row) {
                    *c += sign * t;
                }
            }
            if !any {
                return Status::Optimal;
            }
            let Some((s, dir)) = self.choose_entering(&costs) else {
                return Status::Infeasible;
            };
            match self.ratio_test(s, dir, true) {
                // Sum of infeasibilities is bounded below, so an unbounded ray
                // here means every infeasible basic moves towards its bound with
                // no finite stop; take a unit step and keep going.
                None => self.shift_nonbasic(s, dir),
                Some((step, row)) => self.apply_step(s, dir, step, row),
            }
        }
    }

    fn dual_simplex(&mut self) -> Status {
        loop {
            if self.pivots > self.max_iter {
                return Status::MaxIter;
            }
            let mut leave: Option<(usize, f64, f64)> = None;
            for i in 0..self.m {
                let w = self.infeasibility(self.basis[i]);
                if w == 0.0 {
                    continue;
                }
                let key = match self.pricing {
                    Pricing::Dantzig => w.abs(),
                    Pricing::Bland => -(self.basis[i] as f64),
                };
                if leave.is_none_or(|(_, _, k)| key > k) {
                    leave = Some((i, w, key));
                }
            }
            let Some((r, w, _)) = leave else {
                return Status::Optimal;
            };
            // w < 0: basic must increase to its lower bound, else decrease.
            let need_up = w < 0.0;
            let mut best: Option<(usize, f64, f64)> = None;
            for j in 0..self.n {
                let a = self.tab[r * self.n + j];
                if a.abs() <= PIVOT_TOL {
                    continue;
                }
                let v = self.nonbasic[j];
                let can_up = self.value[v] < self.hi[v];
                let can_down = self.value[v] > self.lo[v];
                // Direction of the nonbasic move that pushes the basic the right way.
                let dir = if (a > 0.0) == need_up { 1.0 } else { -1.0 };
                if (dir > 0.0 && !can_up) || (dir < 0.0 && !can_down) {
                    continue;
                }
                let ratio = (self.obj[j] / a).abs();
                let better = match best {
                    None => true,
                    Some((bj, br, _)) => match self.pricing {
                        Pricing::Dantzig => {
                            ratio < br - 1e-12
                                || (ratio <= br + 1e-12
                                    && a.abs() > self.tab[r * self.n + bj].abs())
                        }
                        Pricing::Bland => {
                            ratio < br - 1e-12 || (ratio <= br + 1e-12 && v < self.nonbasic[bj])
                        }
                    },
                };
                if better {
                    best = Some((j, ratio, dir));
                }
            }
            let Some((s, ratio, _)) = best else {
                return Status::Infeasible;
            };
            self.note_step(ratio);
            let bv = self.basis[r];
            let target = if need_up { self.lo[bv] } else { self.hi[bv] };
            let delta = (target - self.value[bv]) / self.tab[r * self.n + s];
            self.shift_nonbasic(s, delta);
            self.pivot(r, s);
            self.value[bv] = target;
        }
    }
}

type Status = LpStatus;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_upper_bound() {
        let p = LpProblem::new(
            DVector::from_vec(vec![1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![3.0]),
        );
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_face() {
        let p = LpProblem::new(
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .with_bounds(Some(DVector::zeros(2)), None);
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective - 1.0).abs() < 1e-12);
        assert!(s.x.iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn detects_unbounded() {
        let p = LpProblem::new(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DVector::from_vec(vec![1.0]),
        );
        assert_eq!(solve_lp(&p).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn detects_infeasible() {
        // x <= -1 and -x <= -1 (x >= 1).
        let p = LpProblem::new(
            DVector::from_vec(vec![1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![-1.0, -1.0]),
        );
        assert_eq!(solve_lp(&p).unwrap().status, LpStatus::Infeasible);
        let p = LpProblem::new(
            DVector::from_vec(vec![0.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![-1.0]),
        )
        .with_bounds(Some(DVector::zeros(1)), None);
        assert_eq!(solve_lp(&p).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn dual_start_hits_optimum() {
        // maximize x1 + x2, x in [0, 5]^2, x1 + 2 x2 <= 4, 3 x1 + x2 <= 6.
        let p = LpProblem::new(
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 1.0]),
            DVector::from_vec(vec![4.0, 6.0]),
        )
        .with_bounds(Some(DVector::zeros(2)), Some(DVector::from_element(2, 5.0)));
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 1.6).abs() < 1e-10 && (s.x[1] - 1.2).abs() < 1e-10);
    }

    /// Brute-force optimum over all basic solutions of a bounded LP.
    fn vertex_enumeration(p: &LpProblem) -> Option<f64> {
        let n = p.c.len();
        let lb = p.lb.as_ref().unwrap();
        let ub = p.ub.as_ref().unwrap();
        let mut rows: Vec<(Vec<f64>, f64)> = (0..p.a.nrows())
            .map(|i| (p.a.row(i).iter().copied().collect(), p.b[i]))
            .collect();
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            rows.push((e.clone(), ub[j]));
            e[j] = -1.0;
            rows.push((e, -lb[j]));
        }
        let k = rows.len();
        let mut best: Option<f64> = None;
        let mut idx: Vec<usize> = (0..n).collect();
        loop {
            let a = DMatrix::from_fn(n, n, |r, c| rows[idx[r]].0[c]);
            let b = DVector::from_fn(n, |r, _| rows[idx[r]].1);
            if let Some(x) = a.lu().solve(&b) {
                let feasible = rows.iter().all(|(r, rhs)| {
                    r.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() <= rhs + 1e-9
                });
                if feasible && x.iter().all(|v| v.is_finite()) {
                    let val = p.c.dot(&x);
                    best = Some(best.map_or(val, |b: f64| b.max(val)));
                }
            }
            // next combination
            let mut i = n;
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                if idx[i] < k - n + i {
                    idx[i] += 1;
                    for t in i + 1..n {
                        idx[t] = idx[t - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    #[test]
    fn random_lps_match_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut solved = 0;
        for case in 0..300 {
            let n = rng.random_range(1..=3);
            let m = rng.random_range(1..=5);
            let c = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(m, |_, _| rng.random_range(-0.5..1.0));
            let lb = DVector::from_fn(n, |_, _| rng.random_range(-2.0..0.0));
            let ub = DVector::from_fn(n, |_, _| rng.random_range(0.0..2.0));
            let p = LpProblem::new(c, a, b).with_bounds(Some(lb), Some(ub));
            let s = solve_lp(&p).unwrap();
            match vertex_enumeration(&p) {
                Some(opt) => {
                    assert_eq!(s.status, LpStatus::Optimal, "case {case}");
                    assert!((s.objective - opt).abs() <= 1e-8, "case {case}: {} vs {opt}", s.objective);
                    let slack = &p.b - &p.a * &s.x;
                    assert!(slack.min() >= -1e-9, "case {case}");
                    solved += 1;
                }
                None => assert_eq!(s.status, LpStatus::Infeasible, "case {case}"),
            }
        }
        assert!(solved > 100);
    }

    #[test]
    fn many_rows_few_columns() {
        // Polygon approximating the unit disc; maximise along a direction.
        let m = 2000;
        let a = DMatrix::from_fn(m, 2, |i, j| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
            if j == 0 { t.cos() } else { t.sin() }
        });
        let p = LpProblem::new(DVector::from_vec(vec![0.3, 0.4]), a, DVector::from_element(m, 1.0));
        let s = solve_lp(&p).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective - 0.5).abs() < 1e-5);
    }
}
