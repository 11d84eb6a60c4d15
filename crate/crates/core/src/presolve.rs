//! Online removal of provably redundant state constraints.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::SparseRow;
use crate::mpc::CondensedQp;
use crate::reach::{BoxSet, EllipsoidSet, ReachTubes, TubeSet};
use crate::solvers::{cholesky_solve, QpProblem};

/// Level sets with a radius at or below this are treated as the single point `q`.
pub const DEGENERATE_RHO: f64 = 1e-12;

/// Feasibility slack allowed for the warm-start sequence.
pub const WARM_START_TOL: f64 = 1e-9;

/// `{U | J(x, U) <= J(x, U_tilde)} = {U | ||G'(U - q)|| <= rho}`.
#[derive(Debug, Clone)]
pub struct LevelSetEllipse {
    pub q: DVector<f64>,
    pub rho: f64,
    g: DMatrix<f64>,
}

impl LevelSetEllipse {
    pub fn is_degenerate(&self) -> bool {
        self.rho <= DEGENERATE_RHO
    }

    /// `L = G / rho`; `None` for a degenerate level set.
    pub fn shape_matrix(&self) -> Option<DMatrix<f64>> {
        (!self.is_degenerate()).then(|| &self.g / self.rho)
    }

    pub fn as_ellipsoid(&self) -> Option<EllipsoidSet> {
        self.shape_matrix()
            .map(|l| EllipsoidSet::new(l, self.q.clone()).expect("Cholesky factor is invertible"))
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.g.tr_mul(&(u - &self.q)).norm() <= self.rho + tol
    }
}

/// Level set through a warm start `u_tilde`, which must be feasible at `x`.
pub fn level_set(cq: &CondensedQp, x: &DVector<f64>, u_tilde: &DVector<f64>) -> Result<LevelSetEllipse> {
    if u_tilde.len() != cq.num_inputs() {
        return Err(Error::Dimension("warm start has the wrong length".into()));
    }
    let viol = cq.max_violation(x, u_tilde);
    if !(viol <= WARM_START_TOL) {
        return Err(Error::InvalidArgument(format!("warm start violates a constraint by {viol:e}")));
    }
    let free = cq.free_response(x);
    Ok(level_set_from_free(cq, &free, u_tilde))
}

/// As [`level_set`] with the free response given and no feasibility check.
pub fn level_set_from_free(cq: &CondensedQp, free: &DVector<f64>, u_tilde: &DVector<f64>) -> LevelSetEllipse {
    level_set_from_cost(cq, &cq.linear_cost(free), u_tilde)
}

/// As [`level_set`] with `f(x)` given and no feasibility check.
pub fn level_set_from_cost(cq: &CondensedQp, f: &DVector<f64>, u_tilde: &DVector<f64>) -> LevelSetEllipse {
    let g = cq.factor();
    let q = -cholesky_solve(g, f);
    let rho = g.tr_mul(&(u_tilde - &q)).norm();
    LevelSetEllipse { q, rho, g: g.clone() }
}

/// `M_B`: true when `max { c . x | x in box } <= b`.
pub fn test_box(c: &[f64], b: f64, set: &BoxSet) -> bool {
    set.support(c) <= b
}

pub fn test_box_sparse(c: &SparseRow, b: f64, set: &BoxSet) -> bool {
    set.support_sparse(c) <= b
}

/// `M_E`: true when `max { c . x | x in ellipsoid } <= b`.
pub fn test_ellipse(c: &DVector<f64>, b: f64, set: &EllipsoidSet) -> bool {
    set.support(c) <= b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rows are split across the rayon pool; falls back to sequential when
    /// the `parallel` feature is off.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Forward,
    Backward,
    Ellipse,
    Keep,
}

/// Which tests removed how many rows, and how many tests ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReduceStats {
    pub removed_forward: usize,
    pub removed_backward: usize,
    pub removed_ellipse: usize,
    pub retained: usize,
    pub box_tests: usize,
    pub ellipse_tests: usize,
}

/// Retained state-constraint indices per prediction step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedIndexSets {
    /// `sets[i-1]` holds indices into the state set (`i < N`) or terminal set (`i = N`).
    pub sets: Vec<Vec<usize>>,
    /// The same rows as indices into the stacked constraint matrix.
    pub rows: Vec<usize>,
    pub total_rows: usize,
    pub stats: ReduceStats,
}

impl ReducedIndexSets {
    /// Nothing removed.
    pub fn all(cq: &CondensedQp) -> Self {
        let total = cq.num_state_rows();
        let mut sets = vec![Vec::new(); cq.horizon()];
        for tag in cq.tags() {
            sets[tag.step - 1].push(tag.index);
        }
        Self {
            sets,
            rows: (0..total).collect(),
            total_rows: total,
            stats: ReduceStats {
                retained: total,
                ..Default::default()
            },
        }
    }

    pub fn retained(&self) -> usize {
        self.rows.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.sets.iter().map(Vec::len).collect()
    }

    /// Share of state and terminal rows kept (input rows are never counted).
    pub fn retained_fraction(&self) -> f64 {
        if self.total_rows == 0 {
            0.0
        } else {
            self.rows.len() as f64 / self.total_rows as f64
        }
    }
}

enum BoxRef<'a> {
    Axis(&'a [f64], &'a [f64]),
    General(&'a BoxSet),
}

impl<'a> BoxRef<'a> {
    fn new(b: &'a BoxSet) -> Self {
        match b.axis_bounds() {
            Some((lo, hi)) => BoxRef::Axis(lo, hi),
            None => BoxRef::General(b),
        }
    }

    fn support(&self, idx: &[usize], val: &[f64]) -> f64 {
        match self {
            BoxRef::Axis(lo, hi) => idx
                .iter()
                .zip(val)
                .map(|(&i, &v)| {
                    if v > 0.0 {
                        v * hi[i]
                    } else if v < 0.0 {
                        v * lo[i]
                    } else {
                        0.0
                    }
                })
                .sum(),
            BoxRef::General(b) => b.support_sparse(&SparseRow {
                idx: idx.to_vec(),
                val: val.to_vec(),
            }),
        }
    }
}

struct StepContext<'a> {
    z: &'a [f64],
    forward: BoxRef<'a>,
    backward: Option<BoxRef<'a>>,
}

struct RowContext<'a> {
    cq: &'a CondensedQp,
    ls: &'a LevelSetEllipse,
    steps: Vec<StepContext<'a>>,
}

impl RowContext<'_> {
    fn decide(&self, k: usize) -> (Verdict, usize, usize) {
        let cq = self.cq;
        let st = &self.steps[cq.tags()[k].step - 1];
        let (idx, val, b) = cq.stacked_row(k);
        let cz: f64 = idx.iter().zip(val).map(|(&i, &v)| v * st.z[i]).sum();
        let mut boxes = 1;
        // forward tube shifted by A^i x
        if cz + st.forward.support(idx, val) <= b {
            return (Verdict::Forward, boxes, 0);
        }
        if let Some(bb) = &st.backward {
            boxes += 1;
            if bb.support(idx, val) <= b {
                return (Verdict::Backward, boxes, 0);
            }
        }
        let b_hat = b - cz;
        let lhs = cq.state_row_dot(k, &self.ls.q);
        let max = if self.ls.is_degenerate() {
            lhs
        } else {
            lhs + self.ls.rho * cq.row_gnorm(k)
        };
        if max <= b_hat {
            (Verdict::Ellipse, boxes, 1)
        } else {
            (Verdict::Keep, boxes, 1)
        }
    }
}

/// Forward box, then backward box (not at step `N`), then the level-set
/// ellipse; a row is kept only if all three fail. Input rows are untouched.
pub fn reduce(
    cq: &CondensedQp,
    tubes: &ReachTubes,
    ls: &LevelSetEllipse,
    x: &DVector<f64>,
    free: &DVector<f64>,
    exec: Execution,
) -> Result<ReducedIndexSets> {
    let n = cq.problem().sys.state_dim();
    if tubes.horizon() != cq.horizon() || tubes.state_dim() != n {
        return Err(Error::Dimension("tubes do not match the condensed problem".into()));
    }
    if x.len() != n || free.len() != n * cq.horizon() || ls.q.len() != cq.num_inputs() {
        return Err(Error::Dimension("state, free response or level set has the wrong size".into()));
    }
    let use_backward = !tubes.backward_needs_nonnegative_state || x.iter().all(|v| *v >= 0.0);
    let horizon = cq.horizon();
    let steps = (1..=horizon)
        .map(|step| StepContext {
            z: &free.as_slice()[(step - 1) * n..step * n],
            forward: BoxRef::new(&tubes.forward[step - 1]),
            backward: match &tubes.backward[step - 1] {
                TubeSet::Box(bb) if use_backward && step < horizon => Some(BoxRef::new(bb)),
                _ => None,
            },
        })
        .collect();
    let ctx = RowContext { cq, ls, steps };
    let total = cq.num_state_rows();
    let verdicts = decide_all(&ctx, total, exec);

    let mut sets = vec![Vec::new(); cq.horizon()];
    let mut rows = Vec::new();
    let mut stats = ReduceStats::default();
    for (k, (verdict, boxes, ellipses)) in verdicts.into_iter().enumerate() {
        stats.box_tests += boxes;
        stats.ellipse_tests += ellipses;
        match verdict {
            Verdict::Forward => stats.removed_forward += 1,
            Verdict::Backward => stats.removed_backward += 1,
            Verdict::Ellipse => stats.removed_ellipse += 1,
            Verdict::Keep => {
                let tag = cq.tags()[k];
                sets[tag.step - 1].push(tag.index);
                rows.push(k);
            }
        }
    }
    stats.retained = rows.len();
    Ok(ReducedIndexSets {
        sets,
        rows,
        total_rows: total,
        stats,
    })
}

#[cfg(feature = "parallel")]
fn decide_all(ctx: &RowContext<'_>, total: usize, exec: Execution) -> Vec<(Verdict, usize, usize)> {
    use rayon::prelude::*;
    match exec {
        Execution::Parallel => (0..total).into_par_iter().with_min_len(1024).map(|k| ctx.decide(k)).collect(),
        Execution::Sequential => (0..total).map(|k| ctx.decide(k)).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn decide_all(ctx: &RowContext<'_>, total: usize, _exec: Execution) -> Vec<(Verdict, usize, usize)> {
    (0..total).map(|k| ctx.decide(k)).collect()
}

/// The QP with only the retained state rows plus every input row.
pub fn assemble_reduced(cq: &CondensedQp, idx: &ReducedIndexSets, free: &DVector<f64>) -> Result<QpProblem> {
    assemble_reduced_with_cost(cq, idx, free, cq.linear_cost(free))
}

pub fn assemble_reduced_with_cost(
    cq: &CondensedQp,
    idx: &ReducedIndexSets,
    free: &DVector<f64>,
    f: DVector<f64>,
) -> Result<QpProblem> {
    let nm = cq.num_inputs();
    let kept = idx.rows.len();
    let ni = cq.input_rhs().len();
    let mut a = DMatrix::zeros(kept + ni, nm);
    let mut b = DVector::zeros(kept + ni);
    let n = cq.problem().sys.state_dim();
    for c in 0..nm {
        let src = cq.state_rows().column(c);
        let mut dst = a.column_mut(c);
        for (r, &k) in idx.rows.iter().enumerate() {
            dst[r] = src[k];
        }
    }
    for (r, &k) in idx.rows.iter().enumerate() {
        b[r] = cq.state_offset(k, free, n);
    }
    a.rows_mut(kept, ni).copy_from(cq.input_rows());
    b.rows_mut(kept, ni).copy_from(cq.input_rhs());
    QpProblem::with_factor(cq.hessian().clone(), cq.factor().clone(), f, a, b)
}
