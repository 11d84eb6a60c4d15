//! Box and ellipsoid outer approximations of forward and backward reachable tubes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::lti::{LtiSystem, PolyhedralSet, PredictionMatrices, SparseRow};

const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Shape {
    /// `P = I`, stored as coordinate bounds so one-sided boxes stay exact.
    Axis { lo: DVector<f64>, hi: DVector<f64> },
    General {
        p: DMatrix<f64>,
        p_inv: DMatrix<f64>,
        q: DVector<f64>,
        l: DVector<f64>,
    },
}

/// `{x | -l <= P (x - q) <= l}`.
#[derive(Debug, Clone)]
pub struct BoxSet {
    shape: Shape,
}

fn check_widths(l: &DVector<f64>) -> Result<()> {
    if l.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::InvalidArgument("box half-widths must be non-negative".into()));
    }
    Ok(())
}

fn invert(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !p.is_square() {
        return Err(Error::Dimension("box matrix must be square".into()));
    }
    let scale = p.amax().max(f64::MIN_POSITIVE);
    let lu = p.clone().lu();
    let u = lu.u();
    if (0..p.nrows()).any(|i| u[(i, i)].abs() <= PIVOT_TOL * scale) {
        return Err(Error::InvalidArgument("matrix is singular".into()));
    }
    lu.try_inverse()
        .ok_or_else(|| Error::InvalidArgument("matrix is singular".into()))
}

/// `sum_k |w_k| * l_k`, treating `0 * inf` as zero.
fn weighted_width<'a>(w: impl Iterator<Item = &'a f64>, l: &[f64]) -> f64 {
    w.zip(l).filter(|(c, _)| **c != 0.0).map(|(c, li)| c.abs() * li).sum()
}

impl BoxSet {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, l: DVector<f64>) -> Result<Self> {
        if p.nrows() != q.len() || l.len() != q.len() {
            return Err(Error::Dimension("box P, q and l disagree in size".into()));
        }
        check_widths(&l)?;
        let p_inv = invert(&p)?;
        Ok(Self {
            shape: Shape::General { p, p_inv, q, l },
        })
    }

    pub fn axis_aligned(q: DVector<f64>, l: DVector<f64>) -> Result<Self> {
        if q.len() != l.len() {
            return Err(Error::Dimension("box q and l disagree in size".into()));
        }
        check_widths(&l)?;
        Ok(Self {
            shape: Shape::Axis {
                lo: &q - &l,
                hi: &q + &l,
            },
        })
    }

    /// `{x | lo <= x <= hi}`; infinite bounds are allowed.
    pub fn from_bounds(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension("bounds disagree in size".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(a, b)| a.is_nan() || b.is_nan() || a > b) {
            return Err(Error::InvalidArgument("lower bound above upper bound".into()));
        }
        Ok(Self {
            shape: Shape::Axis { lo, hi },
        })
    }

    pub fn point(x: DVector<f64>) -> Self {
        Self {
            shape: Shape::Axis { lo: x.clone(), hi: x },
        }
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            Shape::Axis { lo, .. } => lo.len(),
            Shape::General { q, .. } => q.len(),
        }
    }

    pub fn is_axis_aligned(&self) -> bool {
        matches!(self.shape, Shape::Axis { .. })
    }

    pub fn center(&self) -> DVector<f64> {
        match &self.shape {
            Shape::Axis { lo, hi } => lo.zip_map(hi, |a, b| 0.5 * (a + b)),
            Shape::General { q, .. } => q.clone(),
        }
    }

    pub fn half_widths(&self) -> DVector<f64> {
        match &self.shape {
            Shape::Axis { lo, hi } => hi.zip_map(lo, |b, a| if b == a { 0.0 } else { 0.5 * (b - a) }),
            Shape::General { l, .. } => l.clone(),
        }
    }

    /// The matrix `P` (identity for axis-aligned boxes).
    pub fn p(&self) -> DMatrix<f64> {
        match &self.shape {
            Shape::Axis { lo, .. } => DMatrix::identity(lo.len(), lo.len()),
            Shape::General { p, .. } => p.clone(),
        }
    }

    /// Axis-aligned bounding box `(lo, hi)`.
    pub fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        match &self.shape {
            Shape::Axis { lo, hi } => (lo.clone(), hi.clone()),
            Shape::General { p_inv, q, l, .. } => {
                let w = DVector::from_fn(q.len(), |i, _| weighted_width(p_inv.row(i).iter(), l.as_slice()));
                (q - &w, q + &w)
            }
        }
    }

    /// Coordinate bounds when the box is axis aligned.
    pub fn axis_bounds(&self) -> Option<(&[f64], &[f64])> {
        match &self.shape {
            Shape::Axis { lo, hi } => Some((lo.as_slice(), hi.as_slice())),
            Shape::General { .. } => None,
        }
    }

    /// `max { c . x | x in box }`.
    pub fn support(&self, c: &[f64]) -> f64 {
        match &self.shape {
            Shape::Axis { lo, hi } => c
                .iter()
                .enumerate()
                .map(|(i, &ci)| {
                    if ci > 0.0 {
                        ci * hi[i]
                    } else if ci < 0.0 {
                        ci * lo[i]
                    } else {
                        0.0
                    }
                })
                .sum(),
            Shape::General { p_inv, q, l, .. } => {
                let cv = DVector::from_column_slice(c);
                let w = p_inv.tr_mul(&cv);
                cv.dot(q) + weighted_width(w.iter(), l.as_slice())
            }
        }
    }

    /// `max { c . x | x in box }` for a sparse row.
    pub fn support_sparse(&self, c: &SparseRow) -> f64 {
        match &self.shape {
            Shape::Axis { lo, hi } => c
                .idx
                .iter()
                .zip(&c.val)
                .map(|(&i, &v)| match v.partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Greater) => v * hi[i],
                    Some(std::cmp::Ordering::Less) => v * lo[i],
                    _ => 0.0,
                })
                .sum(),
            Shape::General { .. } => self.support(c.to_dense(self.dim()).as_slice()),
        }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        match &self.shape {
            Shape::Axis { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .all(|(v, (a, b))| *v >= a - tol && *v <= b + tol),
            Shape::General { p, q, l, .. } => {
                let y = p * (x - q);
                y.iter().zip(l.iter()).all(|(v, w)| v.abs() <= w + tol)
            }
        }
    }

    /// The box translated by `offset`.
    pub fn shifted(&self, offset: &[f64]) -> BoxSet {
        let off = DVector::from_column_slice(offset);
        let shape = match &self.shape {
            Shape::Axis { lo, hi } => Shape::Axis {
                lo: lo + &off,
                hi: hi + &off,
            },
            Shape::General { p, p_inv, q, l } => Shape::General {
                p: p.clone(),
                p_inv: p_inv.clone(),
                q: q + off,
                l: l.clone(),
            },
        };
        BoxSet { shape }
    }

    /// Half-widths scaled by `factor` about the center.
    pub fn inflated(&self, factor: f64) -> BoxSet {
        let shape = match &self.shape {
            Shape::Axis { lo, hi } => {
                let mut lo = lo.clone();
                let mut hi = hi.clone();
                for i in 0..lo.len() {
                    if lo[i].is_finite() && hi[i].is_finite() {
                        let c = 0.5 * (lo[i] + hi[i]);
                        let w = 0.5 * (hi[i] - lo[i]) * factor;
                        lo[i] = c - w;
                        hi[i] = c + w;
                    }
                }
                Shape::Axis { lo, hi }
            }
            Shape::General { p, p_inv, q, l } => Shape::General {
                p: p.clone(),
                p_inv: p_inv.clone(),
                q: q.clone(),
                l: l * factor,
            },
        };
        BoxSet { shape }
    }

    /// Uniform sample; only defined for bounded boxes.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        match &self.shape {
            Shape::Axis { lo, hi } => DVector::from_fn(lo.len(), |i, _| {
                assert!(lo[i].is_finite() && hi[i].is_finite(), "cannot sample an unbounded box");
                lo[i] + (hi[i] - lo[i]) * rng.random::<f64>()
            }),
            Shape::General { p_inv, q, l, .. } => {
                let y = DVector::from_fn(q.len(), |i, _| l[i] * (2.0 * rng.random::<f64>() - 1.0));
                q + p_inv * y
            }
        }
    }
}

/// `{x | ||L' (x - q)||_2 <= 1}`.
#[derive(Debug, Clone)]
pub struct EllipsoidSet {
    l: DMatrix<f64>,
    l_inv: DMatrix<f64>,
    q: DVector<f64>,
}

impl EllipsoidSet {
    /// `L` must be invertible; it need not be symmetric (a Cholesky factor is typical).
    pub fn new(l: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        if l.nrows() != q.len() {
            return Err(Error::Dimension("ellipsoid L and q disagree in size".into()));
        }
        let l_inv = invert(&l)?;
        Ok(Self { l, l_inv, q })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn shape_matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `max { c . x | x in ellipsoid } = c . q + ||L^{-1} c||`.
    pub fn support(&self, c: &DVector<f64>) -> f64 {
        c.dot(&self.q) + (&self.l_inv * c).norm()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.l.tr_mul(&(x - &self.q)).norm() <= 1.0 + tol
    }

    /// Sample uniformly on the boundary (`on_boundary`) or in the interior.
    pub fn sample<R: Rng>(&self, rng: &mut R, on_boundary: bool) -> DVector<f64> {
        let d = self.dim();
        let mut z = DVector::from_fn(d, |_, _| {
            let (u1, u2): (f64, f64) = (rng.random::<f64>().max(1e-300), rng.random());
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        });
        let norm = z.norm().max(f64::MIN_POSITIVE);
        let radius = if on_boundary { 1.0 } else { rng.random::<f64>().powf(1.0 / d as f64) };
        z *= radius / norm;
        &self.q + self.l_inv.tr_mul(&z)
    }
}

/// One entry of a reachable tube.
#[derive(Debug, Clone)]
pub enum TubeSet {
    Box(BoxSet),
    /// All of `R^n`.
    Universal,
}

impl TubeSet {
    pub fn as_box(&self) -> Option<&BoxSet> {
        match self {
            TubeSet::Box(b) => Some(b),
            TubeSet::Universal => None,
        }
    }
}

/// State-independent tube approximations for steps `1..=N`.
///
/// `forward[i-1]` outer-approximates the set reachable from the origin in `i`
/// steps and is shifted by `A^i x` at run time. `backward[i-1]` outer-approximates
/// the states from which the terminal set is reachable in `N - i` steps;
/// `backward[N-1]` is always universal.
#[derive(Debug, Clone)]
pub struct ReachTubes {
    pub forward: Vec<BoxSet>,
    pub backward: Vec<TubeSet>,
    /// The backward boxes are only valid for non-negative trajectories.
    pub backward_needs_nonnegative_state: bool,
}

impl ReachTubes {
    pub fn new(forward: Vec<BoxSet>, mut backward: Vec<TubeSet>) -> Result<Self> {
        if forward.is_empty() || forward.len() != backward.len() {
            return Err(Error::Dimension("forward and backward tubes need N entries each".into()));
        }
        let n = forward[0].dim();
        if forward.iter().any(|b| b.dim() != n) || backward.iter().filter_map(TubeSet::as_box).any(|b| b.dim() != n) {
            return Err(Error::Dimension("tube sets disagree in dimension".into()));
        }
        *backward.last_mut().expect("non-empty") = TubeSet::Universal;
        Ok(Self {
            forward,
            backward,
            backward_needs_nonnegative_state: false,
        })
    }

    /// Tubes with no information: every set is universal.
    pub fn universal(n: usize, horizon: usize) -> Self {
        let inf = DVector::from_element(n, f64::INFINITY);
        let all = BoxSet::from_bounds(-&inf, inf).expect("valid bounds");
        Self {
            forward: vec![all; horizon],
            backward: vec![TubeSet::Universal; horizon],
            backward_needs_nonnegative_state: false,
        }
    }

    pub fn horizon(&self) -> usize {
        self.forward.len()
    }

    pub fn state_dim(&self) -> usize {
        self.forward[0].dim()
    }
}

fn check_system_boxes(sys: &LtiSystem, u: &BoxSet, horizon: usize) -> Result<()> {
    if u.dim() != sys.input_dim() {
        return Err(Error::Dimension("input box does not match the system".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    Ok(())
}

/// `|M| w + |K| v` row by row, skipping zero coefficients.
fn propagate_width(m: &DMatrix<f64>, w: &DVector<f64>, k: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |i, _| {
        weighted_width(m.row(i).iter(), w.as_slice()) + weighted_width(k.row(i).iter(), v.as_slice())
    })
}

fn center_width(b: &BoxSet) -> (DVector<f64>, DVector<f64>) {
    let (lo, hi) = b.bounds();
    let c = lo.zip_map(&hi, |a, b| if a == b { a } else { 0.5 * (a + b) });
    let w = hi.zip_map(&lo, |b, a| if a == b { 0.0 } else { 0.5 * (b - a) });
    (c, w)
}

fn box_from(c: &DVector<f64>, w: &DVector<f64>) -> BoxSet {
    let lo = c.zip_map(w, |c, w| if w.is_infinite() { f64::NEG_INFINITY } else { c - w });
    let hi = c.zip_map(w, |c, w| if w.is_infinite() { f64::INFINITY } else { c + w });
    BoxSet::from_bounds(lo, hi).expect("ordered bounds")
}

/// Interval outer approximation of the forward reachable sets from `start`.
/// Entry `i-1` contains every `x_i` with `x_0 in start` and `u_k in u`.
pub fn forward_box_recursion(sys: &LtiSystem, u: &BoxSet, start: &BoxSet, horizon: usize) -> Result<Vec<BoxSet>> {
    check_system_boxes(sys, u, horizon)?;
    if start.dim() != sys.state_dim() {
        return Err(Error::Dimension("start box does not match the system".into()));
    }
    let (uc, uw) = center_width(u);
    let (mut c, mut w) = center_width(start);
    let bu = sys.b() * &uc;
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let next_c = sys.a() * &c + &bu;
        w = propagate_width(sys.a(), &w, sys.b(), &uw);
        c = next_c;
        out.push(box_from(&c, &w));
    }
    Ok(out)
}

/// Tubes translated by the free response: box `i` moves by `A^i x`.
pub fn shift_tube(tubes: &ReachTubes, pred: &PredictionMatrices, x: &DVector<f64>) -> Result<Vec<BoxSet>> {
    let n = pred.state_dim();
    if x.len() != n || tubes.state_dim() != n || tubes.horizon() != pred.horizon() {
        return Err(Error::Dimension("tubes, prediction and state disagree".into()));
    }
    let free = pred.free_response(x);
    Ok(tubes
        .forward
        .iter()
        .enumerate()
        .map(|(i, b)| b.shifted(&free.as_slice()[i * n..(i + 1) * n]))
        .collect())
}

/// Interval outer approximation of the backward reachable sets of `xterm`
/// through `x = A^{-1} (y - B u)`. Entry `N-1` is the universal marker.
pub fn backward_box_recursion(
    sys: &LtiSystem,
    u: &BoxSet,
    xterm: &PolyhedralSet,
    horizon: usize,
) -> Result<Vec<TubeSet>> {
    check_system_boxes(sys, u, horizon)?;
    let n = sys.state_dim();
    if xterm.dim() != n {
        return Err(Error::Dimension("terminal set does not match the system".into()));
    }
    let a_inv = invert(sys.a()).map_err(|_| {
        Error::InvalidArgument("backward box recursion needs an invertible A".into())
    })?;
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        hi[i] = xterm.support(&e)?.ok_or_else(|| Error::InvalidArgument("terminal set is empty".into()))?;
        e[i] = -1.0;
        lo[i] = -xterm.support(&e)?.expect("non-empty");
    }
    let ainv_b = &a_inv * sys.b();
    let (uc, uw) = center_width(u);
    let mut cur = BoxSet::from_bounds(lo, hi)?;
    let mut out = vec![TubeSet::Universal; horizon];
    for k in (0..horizon - 1).rev() {
        let (c, w) = center_width(&cur);
        let next_c = &a_inv * c - &ainv_b * &uc;
        let next_w = propagate_width(&a_inv, &w, &ainv_b, &uw);
        cur = box_from(&next_c, &next_w);
        out[k] = TubeSet::Box(cur.clone());
    }
    Ok(out)
}
