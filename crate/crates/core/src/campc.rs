//! Receding-horizon ca-MPC controller with an optional full-MPC co-run.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mpc::CondensedQp;
use crate::presolve::{assemble_reduced_with_cost, level_set_from_cost, reduce, Execution, ReduceStats, WARM_START_TOL};
use crate::reach::ReachTubes;
use crate::solvers::{solve_qp, QpProblem, QpSolution, QpStatus, DEFAULT_TOL_KKT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Pre-solve then the reduced QP.
    Campc,
    /// The full stacked QP every step.
    Full,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Campc => "campc",
            Mode::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ControllerOptions {
    pub mode: Mode,
    pub tol_kkt: f64,
    /// Co-solve the full QP and record `||U_reduced - U_full||_inf`.
    pub oracle: bool,
    pub execution: Execution,
    /// Each step's pre-solve and QP are run this many times and the fastest
    /// run is recorded. The results of every repeat are identical.
    pub timing_repeats: usize,
}

impl Default for ControllerOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Campc,
            tol_kkt: DEFAULT_TOL_KKT,
            oracle: false,
            execution: Execution::Parallel,
            timing_repeats: 1,
        }
    }
}

/// Wall-clock seconds per phase. `prediction` covers `Phi x` and `f(x)`,
/// which both modes need.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTimings {
    pub prediction: f64,
    pub presolve: f64,
    pub qp_solve: f64,
    pub total: f64,
}

impl StepTimings {
    /// Pre-solve plus QP.
    pub fn controller(&self) -> f64 {
        self.presolve + self.qp_solve
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub k: usize,
    /// Solved as a full QP because no feasible warm start existed.
    pub bootstrap: bool,
    pub u: DVector<f64>,
    pub ustar: DVector<f64>,
    pub timings: StepTimings,
    pub retained_rows: usize,
    pub total_rows: usize,
    pub stats: Option<ReduceStats>,
    pub qp_rows: usize,
    pub qp_iterations: usize,
    /// `||U_reduced - U_full||_inf` when the oracle ran.
    pub max_input_delta: Option<f64>,
}

impl StepRecord {
    /// Retained state and terminal rows over all of them; input rows are not counted.
    pub fn retained_fraction(&self) -> f64 {
        if self.total_rows == 0 {
            0.0
        } else {
            self.retained_rows as f64 / self.total_rows as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub mode: Mode,
    /// `x_0, ..., x_T`.
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub steps: Vec<StepRecord>,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn reduced_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(|s| !s.bootstrap)
    }

    /// Largest pre-solve + QP time over the non-bootstrap steps.
    pub fn max_controller_time(&self) -> f64 {
        self.reduced_steps().map(|s| s.timings.controller()).fold(0.0, f64::max)
    }

    pub fn max_presolve_time(&self) -> f64 {
        self.reduced_steps().map(|s| s.timings.presolve).fold(0.0, f64::max)
    }

    pub fn max_qp_time(&self) -> f64 {
        self.reduced_steps().map(|s| s.timings.qp_solve).fold(0.0, f64::max)
    }

    pub fn max_prediction_time(&self) -> f64 {
        self.steps.iter().map(|s| s.timings.prediction).fold(0.0, f64::max)
    }

    pub fn max_input_delta(&self) -> Option<f64> {
        self.steps
            .iter()
            .map(|s| s.max_input_delta)
            .try_fold(0.0, |acc: f64, d| d.map(|d| acc.max(d)))
            .filter(|_| !self.steps.is_empty())
    }

    pub fn retained_fractions(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.retained_fraction()).collect()
    }
}

/// Shifted previous sequence with `K x_N` appended.
pub fn warm_start(uprev: &DVector<f64>, kaux: &DMatrix<f64>, xn_prev: &DVector<f64>) -> Result<DVector<f64>> {
    let m = kaux.nrows();
    if m == 0 || !uprev.len().is_multiple_of(m) || uprev.len() < m || kaux.ncols() != xn_prev.len() {
        return Err(Error::Dimension("warm-start inputs do not fit together".into()));
    }
    let len = uprev.len();
    let mut u = DVector::zeros(len);
    u.rows_mut(0, len - m).copy_from(&uprev.rows(m, len - m));
    u.rows_mut(len - m, m).copy_from(&(kaux * xn_prev));
    Ok(u)
}

pub struct Controller {
    cq: CondensedQp,
    tubes: ReachTubes,
    opts: ControllerOptions,
    k: usize,
    uprev: Option<DVector<f64>>,
    xn_prev: Option<DVector<f64>>,
    template: Option<QpProblem>,
}

fn check_status(sol: &QpSolution, what: &str) -> Result<()> {
    match sol.status {
        QpStatus::Optimal => Ok(()),
        QpStatus::Infeasible => Err(Error::Infeasible(format!("{what} is infeasible"))),
        QpStatus::MaxIter => Err(Error::Numerical(format!("{what} hit the iteration limit"))),
    }
}

impl Controller {
    pub fn new(cq: CondensedQp, tubes: ReachTubes, opts: ControllerOptions) -> Result<Self> {
        let n = cq.problem().sys.state_dim();
        if tubes.horizon() != cq.horizon() || tubes.state_dim() != n {
            return Err(Error::Dimension("tubes do not match the condensed problem".into()));
        }
        if !(opts.tol_kkt > 0.0 && opts.tol_kkt.is_finite()) {
            return Err(Error::InvalidArgument("tol_kkt must be positive".into()));
        }
        if opts.timing_repeats == 0 {
            return Err(Error::InvalidArgument("timing_repeats must be at least 1".into()));
        }
        Ok(Self {
            cq,
            tubes,
            opts,
            k: 0,
            uprev: None,
            xn_prev: None,
            template: None,
        })
    }

    pub fn condensed(&self) -> &CondensedQp {
        &self.cq
    }

    pub fn tubes(&self) -> &ReachTubes {
        &self.tubes
    }

    pub fn options(&self) -> &ControllerOptions {
        &self.opts
    }

    pub fn reset(&mut self) {
        self.k = 0;
        self.uprev = None;
        self.xn_prev = None;
    }

    fn full_problem(&mut self, free: &DVector<f64>, f: &DVector<f64>) -> Result<&QpProblem> {
        let n = self.cq.problem().sys.state_dim();
        match &mut self.template {
            None => {
                let mut t = self.cq.full_qp_from_free(free)?;
                t.f.copy_from(f);
                self.template = Some(t);
            }
            Some(t) => {
                for k in 0..self.cq.num_state_rows() {
                    t.b[k] = self.cq.state_offset(k, free, n);
                }
                t.f.copy_from(f);
            }
        }
        Ok(self.template.as_ref().expect("template was just set"))
    }

    /// One control step at state `x`.
    pub fn step(&mut self, x: &DVector<f64>) -> Result<StepRecord> {
        let n = self.cq.problem().sys.state_dim();
        let m = self.cq.problem().sys.input_dim();
        if x.len() != n || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("state must be finite with the system dimension".into()));
        }
        let tol = self.opts.tol_kkt;
        let total_rows = self.cq.num_state_rows();

        let start = Instant::now();
        let free = self.cq.free_response(x);
        let f = self.cq.linear_cost_state(x);
        let t_pred = start.elapsed().as_secs_f64();

        let warm = match (&self.uprev, &self.xn_prev) {
            (Some(u), Some(xn)) => Some(warm_start(u, &self.cq.problem().kaux, xn)?),
            // first step: the auxiliary-law rollout, when it is feasible
            _ => {
                let aux = self.cq.auxiliary_rollout(x)?;
                (self.cq.max_violation_from_free(&free, &aux) <= WARM_START_TOL).then_some(aux)
            }
        };
        let bootstrap = warm.is_none();

        let mut timings = StepTimings {
            prediction: t_pred,
            ..StepTimings::default()
        };
        type Outcome = (QpSolution, usize, Option<ReduceStats>, usize, f64, f64);
        let mut outcome: Option<Outcome> = None;
        for _ in 0..self.opts.timing_repeats {
            let (sol, retained, stats, qp_rows, pre, qp_time) = if self.opts.mode == Mode::Full || bootstrap {
                let t = Instant::now();
                let qp = self.full_problem(&free, &f)?;
                let sol = solve_qp(qp, warm.as_ref(), tol)?;
                let qp_time = t.elapsed().as_secs_f64();
                let rows = qp.num_constraints();
                (sol, total_rows, None, rows, 0.0, qp_time)
            } else {
                let warm = warm.as_ref().expect("checked above");
                let t = Instant::now();
                let ls = level_set_from_cost(&self.cq, &f, warm);
                let idx = reduce(&self.cq, &self.tubes, &ls, x, &free, self.opts.execution)?;
                let pre = t.elapsed().as_secs_f64();
                let t = Instant::now();
                let qp = assemble_reduced_with_cost(&self.cq, &idx, &free, f.clone())?;
                let sol = solve_qp(&qp, Some(warm), tol)?;
                let qp_time = t.elapsed().as_secs_f64();
                (sol, idx.retained(), Some(idx.stats), qp.num_constraints(), pre, qp_time)
            };
            let better = match &outcome {
                None => true,
                Some((.., best_pre, best_qp)) => pre + qp_time < best_pre + best_qp,
            };
            if better {
                outcome = Some((sol, retained, stats, qp_rows, pre, qp_time));
            }
        }
        let (sol, retained, stats, qp_rows, pre, qp_time) = outcome.expect("at least one repeat");
        timings.presolve = pre;
        timings.qp_solve = qp_time;
        timings.total = t_pred + pre + qp_time;
        check_status(&sol, if stats.is_some() { "reduced QP" } else { "full QP" })?;

        // the shifted sequence must stay feasible; the level set relies on it
        if let (Some(_), Some(warm), Some(_)) = (&stats, &warm, &self.uprev) {
            let viol = self.cq.max_violation_from_free(&free, warm);
            if !(viol <= WARM_START_TOL) {
                return Err(Error::Numerical(format!("warm start violates a constraint by {viol:e}")));
            }
        }

        let max_input_delta = if self.opts.oracle {
            if stats.is_some() {
                let qp = self.full_problem(&free, &f)?;
                let full = solve_qp(qp, warm.as_ref(), tol)?;
                check_status(&full, "oracle full QP")?;
                Some((&sol.ustar - &full.ustar).amax())
            } else {
                Some(0.0)
            }
        } else {
            None
        };

        let horizon = self.cq.horizon();
        let xn = free.rows((horizon - 1) * n, n) + self.cq.prediction().gamma_block_row(horizon - 1) * &sol.ustar;
        let record = StepRecord {
            k: self.k,
            bootstrap: self.opts.mode == Mode::Campc && bootstrap,
            u: sol.ustar.rows(0, m).clone_owned(),
            ustar: sol.ustar.clone(),
            timings,
            retained_rows: retained,
            total_rows,
            stats,
            qp_rows,
            qp_iterations: sol.iterations,
            max_input_delta,
        };
        self.uprev = Some(sol.ustar);
        self.xn_prev = Some(xn);
        self.k += 1;
        Ok(record)
    }
}

/// Closed loop from `x0` for `steps` steps on the nominal model.
pub fn run(ctrl: &mut Controller, x0: &DVector<f64>, steps: usize) -> Result<SimulationTrace> {
    ctrl.reset();
    let sys = ctrl.condensed().problem().sys.clone();
    let mut states = vec![x0.clone()];
    let mut inputs = Vec::with_capacity(steps);
    let mut records = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for _ in 0..steps {
        let rec = ctrl.step(&x)?;
        x = sys.simulate_step(&x, &rec.u)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("closed-loop state became non-finite".into()));
        }
        inputs.push(rec.u.clone());
        states.push(x.clone());
        records.push(rec);
    }
    Ok(SimulationTrace {
        mode: ctrl.options().mode,
        states,
        inputs,
        steps: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperthermia::{BackwardRule, HeatParams, HeatScenario};
    use crate::lti::{LtiSystem, PolyhedralSet};
    use crate::mpc::MpcProblem;
    use crate::reach::{backward_box_recursion, forward_box_recursion, BoxSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_opts(mode: Mode) -> ControllerOptions {
        ControllerOptions {
            mode,
            oracle: true,
            ..ControllerOptions::default()
        }
    }

    fn heat_controller(s: &HeatScenario, mode: Mode, oracle: bool) -> Controller {
        let cq = CondensedQp::new(s.mpc_problem(10).unwrap()).unwrap();
        let tubes = s.tubes(10, BackwardRule::Projection).unwrap();
        let opts = ControllerOptions {
            oracle,
            ..oracle_opts(mode)
        };
        Controller::new(cq, tubes, opts).unwrap()
    }

    /// Random system with `||A||_inf = 0.9` and cube constraints, so the state
    /// cube is invariant under `u = 0` and serves as the terminal set.
    fn cube_problem(rng: &mut ChaCha8Rng, n: usize, m: usize, horizon: usize) -> (CondensedQp, ReachTubes) {
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let norm = (0..n).map(|i| a.row(i).abs().sum()).fold(0.0, f64::max);
        a *= 0.9 / norm;
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-0.5..0.5));
        let sys = LtiSystem::new(a, b).unwrap();
        let cube = |w: f64, d: usize| PolyhedralSet::bounds(&DVector::from_element(d, -w), &DVector::from_element(d, w));
        let xref = DVector::from_fn(n, |_, _| rng.random_range(-2.5..2.5));
        let problem = MpcProblem::builder(sys.clone(), cube(2.0, n), cube(1.0, m), cube(2.0, n), horizon)
            .reference(xref, DVector::zeros(m))
            .build()
            .unwrap();
        let ubox = BoxSet::from_bounds(DVector::from_element(m, -1.0), DVector::from_element(m, 1.0)).unwrap();
        let forward = forward_box_recursion(&sys, &ubox, &BoxSet::point(DVector::zeros(n)), horizon).unwrap();
        let backward = backward_box_recursion(&sys, &ubox, &problem.xterm, horizon).unwrap();
        let tubes = ReachTubes::new(forward, backward).unwrap();
        (CondensedQp::new(problem).unwrap(), tubes)
    }

    #[test]
    fn warm_start_shifts_and_appends() {
        let u = DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = DMatrix::from_row_slice(2, 1, &[2.0, -1.0]);
        let w = warm_start(&u, &k, &DVector::from_element(1, 0.5)).unwrap();
        assert_eq!(w.as_slice(), &[3.0, 4.0, 5.0, 6.0, 1.0, -0.5]);
        assert!(warm_start(&u, &DMatrix::zeros(4, 1), &DVector::zeros(1)).is_err());
    }

    #[test]
    fn zero_steps_give_empty_trace() {
        let s = HeatScenario::build(HeatParams::with_n(20)).unwrap();
        let mut c = heat_controller(&s, Mode::Campc, true);
        let tr = run(&mut c, &s.initial_state(), 0).unwrap();
        assert!(tr.is_empty());
        assert_eq!(tr.states.len(), 1);
        assert_eq!(tr.max_input_delta(), None);
    }

    #[test]
    fn heat_closed_loop_matches_full_mpc() {
        let s = HeatScenario::build(HeatParams::with_n(40)).unwrap();
        let mut ca = heat_controller(&s, Mode::Campc, true);
        let mut full = heat_controller(&s, Mode::Full, false);
        let a = run(&mut ca, &s.initial_state(), 80).unwrap();
        let b = run(&mut full, &s.initial_state(), 80).unwrap();
        assert!(a.max_input_delta().unwrap() <= 1e-7);
        for (ua, ub) in a.inputs.iter().zip(&b.inputs) {
            assert!((ua - ub).amax() <= 1e-7);
        }
        // x0 = 0 lies in the terminal set, so the zero rollout is a valid first warm start
        assert!(a.steps.iter().all(|r| !r.bootstrap));
        assert!(a.steps[0].retained_fraction() < 0.05);
        assert!(b.steps.iter().all(|r| !r.bootstrap && r.retained_fraction() == 1.0));
        // something was removed somewhere, and the constraints held
        assert!(a.steps.iter().any(|r| r.retained_fraction() < 1.0));
        for x in &a.states {
            assert!((x - &s.tmax).max() <= 1e-6);
        }
        for r in &a.steps {
            let t = r.timings;
            assert!(t.presolve >= 0.0 && t.qp_solve >= 0.0);
            assert!(t.presolve + t.qp_solve <= t.total);
        }
    }

    #[test]
    fn infeasible_rollout_bootstraps_with_full_solve() {
        // 0.9^5 * 1.9 > 0.5, so coasting misses the terminal cube but steering reaches it
        let sys = LtiSystem::new(DMatrix::identity(2, 2) * 0.9, DMatrix::identity(2, 2)).unwrap();
        let cube = |w: f64| PolyhedralSet::bounds(&DVector::from_element(2, -w), &DVector::from_element(2, w));
        let problem = MpcProblem::builder(sys.clone(), cube(2.0), cube(1.0), cube(0.5), 5).build().unwrap();
        let ubox = BoxSet::from_bounds(DVector::from_element(2, -1.0), DVector::from_element(2, 1.0)).unwrap();
        let forward = forward_box_recursion(&sys, &ubox, &BoxSet::point(DVector::zeros(2)), 5).unwrap();
        let backward = backward_box_recursion(&sys, &ubox, &problem.xterm, 5).unwrap();
        let tubes = ReachTubes::new(forward, backward).unwrap();
        let mut c = Controller::new(CondensedQp::new(problem).unwrap(), tubes, oracle_opts(Mode::Campc)).unwrap();
        let x0 = DVector::from_element(2, 1.9);
        let tr = run(&mut c, &x0, 10).unwrap();
        assert!(tr.steps[0].bootstrap && tr.steps[0].retained_fraction() == 1.0);
        assert!(tr.steps.iter().skip(1).all(|r| !r.bootstrap));
        assert!(tr.max_input_delta().unwrap() <= 1e-7);
    }

    #[test]
    fn loose_limits_reduce_to_input_constrained_mpc() {
        let p = HeatParams {
            healthy_limit: 1e6,
            tumor_limit: 1e6,
            ..HeatParams::with_n(25)
        };
        let s = HeatScenario::build(p).unwrap();
        let mut c = heat_controller(&s, Mode::Campc, true);
        let tr = run(&mut c, &s.initial_state(), 15).unwrap();
        for r in &tr.steps {
            assert_eq!(r.retained_rows, 0);
            assert_eq!(r.qp_rows, 10 * 4);
        }
        assert!(tr.max_input_delta().unwrap() <= 1e-7);
    }

    #[test]
    fn generic_tubes_keep_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (cq, tubes) = cube_problem(&mut rng, 6, 2, 5);
            let mut c = Controller::new(cq, tubes, oracle_opts(Mode::Campc)).unwrap();
            let x0 = DVector::from_fn(6, |_, _| rng.random_range(-1.5..1.5));
            let tr = run(&mut c, &x0, 25).unwrap();
            assert!(tr.max_input_delta().unwrap() <= 1e-7);
        }
    }

    #[test]
    fn sequential_and_parallel_traces_agree() {
        let s = HeatScenario::build(HeatParams::with_n(30)).unwrap();
        let mut a = heat_controller(&s, Mode::Campc, false);
        let mut b = heat_controller(&s, Mode::Campc, false);
        b.opts.execution = Execution::Sequential;
        let ta = run(&mut a, &s.initial_state(), 40).unwrap();
        let tb = run(&mut b, &s.initial_state(), 40).unwrap();
        assert_eq!(ta.inputs, tb.inputs);
        assert_eq!(ta.retained_fractions(), tb.retained_fractions());
    }

    #[test]
    fn repeats_do_not_change_results() {
        let s = HeatScenario::build(HeatParams::with_n(30)).unwrap();
        let mut a = heat_controller(&s, Mode::Campc, false);
        let mut b = heat_controller(&s, Mode::Campc, false);
        b.opts.timing_repeats = 3;
        let ta = run(&mut a, &s.initial_state(), 30).unwrap();
        let tb = run(&mut b, &s.initial_state(), 30).unwrap();
        assert_eq!(ta.inputs, tb.inputs);
    }

    #[test]
    fn infeasible_state_is_reported() {
        let s = HeatScenario::build(HeatParams::with_n(20)).unwrap();
        let mut c = heat_controller(&s, Mode::Campc, false);
        let hot = s.tmax.clone() * 3.0;
        assert!(matches!(c.step(&hot), Err(Error::Infeasible(_))));
        let bad = DVector::from_element(20, f64::NAN);
        assert!(matches!(c.step(&bad), Err(Error::InvalidArgument(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_initial_states_keep_equivalence(seed in 0u64..1000, scale in 0.0f64..1.0) {
            let s = HeatScenario::build(HeatParams::with_n(20)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = DVector::from_fn(20, |i, _| s.tterm[i] * scale * rng.random::<f64>());
            let mut c = heat_controller(&s, Mode::Campc, true);
            let tr = run(&mut c, &x0, 12).unwrap();
            prop_assert!(tr.max_input_delta().unwrap() <= 1e-7);
        }
    }
}
