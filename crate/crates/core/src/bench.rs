//! Scenario files, CSV output and the `run` / `sweep` / `check` commands.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::campc::{run, Controller, ControllerOptions, Mode, SimulationTrace};
use crate::error::{Error, Result};
use crate::hyperthermia::{ActuatorProfile, BackwardRule, CheckResult, GaussianBump, HeatParams, HeatScenario};
use crate::mpc::CondensedQp;
use crate::presolve::Execution;
use crate::solvers::DEFAULT_TOL_KKT;

impl Error {
    /// 1 usage or schema, 2 infeasible, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_) => 2,
            Error::Numerical(_) | Error::NotPositiveDefinite { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub n: usize,
    pub dt: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintSection {
    pub healthy_limit: f64,
    pub tumor_limit: f64,
    pub tumor_interval: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub weight: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActuatorSection {
    pub gain: f64,
    /// One list of Gaussian bumps per actuator.
    pub profiles: Vec<Vec<BumpSpec>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightSection {
    pub q: f64,
    pub r: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackwardRuleSpec {
    Projection,
    Perturbation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    #[serde(rename = "N")]
    pub horizon: usize,
    pub weights: WeightSection,
    pub tol_kkt: f64,
    pub backward_rule: BackwardRuleSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSpec {
    Campc,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub steps: usize,
    pub oracle: bool,
    pub seed: u64,
    pub mode: ModeSpec,
    pub timing_repeats: usize,
    /// Uniform initial temperature increase.
    pub initial_temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioFile {
    pub system: SystemSection,
    pub constraints: ConstraintSection,
    pub actuators: ActuatorSection,
    pub mpc: MpcSection,
    pub run: RunSection,
}

impl Default for SystemSection {
    fn default() -> Self {
        let p = HeatParams::default();
        Self {
            n: p.n,
            dt: p.dt,
            alpha: p.alpha,
            beta: p.beta,
            gamma: p.gamma,
        }
    }
}

impl Default for ConstraintSection {
    fn default() -> Self {
        let p = HeatParams::default();
        Self {
            healthy_limit: p.healthy_limit,
            tumor_limit: p.tumor_limit,
            tumor_interval: [p.tumor.0, p.tumor.1],
        }
    }
}

impl Default for ActuatorSection {
    fn default() -> Self {
        let p = HeatParams::default();
        Self {
            gain: p.gain,
            profiles: p
                .actuators
                .iter()
                .map(|a| {
                    a.bumps
                        .iter()
                        .map(|b| BumpSpec {
                            weight: b.weight,
                            center: b.center,
                            width: b.width,
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

impl Default for WeightSection {
    fn default() -> Self {
        Self { q: 1.0, r: 1.0, p: 1.0 }
    }
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            horizon: 10,
            weights: WeightSection::default(),
            tol_kkt: DEFAULT_TOL_KKT,
            backward_rule: BackwardRuleSpec::Projection,
        }
    }
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            steps: 120,
            oracle: false,
            seed: 0,
            mode: ModeSpec::Campc,
            timing_repeats: 1,
            initial_temperature: 0.0,
        }
    }
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialises")
    }

    pub fn with_n(&self, n: usize) -> Self {
        let mut s = self.clone();
        s.system.n = n;
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.heat_params().validate()?;
        let m = &self.mpc;
        if m.horizon == 0 {
            return Err(Error::Scenario("N must be at least 1".into()));
        }
        for (name, v) in [("q", m.weights.q), ("r", m.weights.r), ("p", m.weights.p), ("tol_kkt", m.tol_kkt)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Scenario(format!("{name} must be positive and finite")));
            }
        }
        if !self.run.initial_temperature.is_finite() {
            return Err(Error::Scenario("initial_temperature must be finite".into()));
        }
        if self.run.timing_repeats == 0 {
            return Err(Error::Scenario("timing_repeats must be at least 1".into()));
        }
        Ok(())
    }

    pub fn heat_params(&self) -> HeatParams {
        HeatParams {
            n: self.system.n,
            dt: self.system.dt,
            alpha: self.system.alpha,
            beta: self.system.beta,
            gamma: self.system.gamma,
            tumor: (self.constraints.tumor_interval[0], self.constraints.tumor_interval[1]),
            healthy_limit: self.constraints.healthy_limit,
            tumor_limit: self.constraints.tumor_limit,
            actuators: self
                .actuators
                .profiles
                .iter()
                .map(|bumps| ActuatorProfile {
                    bumps: bumps
                        .iter()
                        .map(|b| GaussianBump {
                            weight: b.weight,
                            center: b.center,
                            width: b.width,
                        })
                        .collect(),
                })
                .collect(),
            gain: self.actuators.gain,
        }
    }

    pub fn backward_rule(&self) -> BackwardRule {
        match self.mpc.backward_rule {
            BackwardRuleSpec::Projection => BackwardRule::Projection,
            BackwardRuleSpec::Perturbation => BackwardRule::Perturbation,
        }
    }

    pub fn mode(&self) -> Mode {
        match self.run.mode {
            ModeSpec::Campc => Mode::Campc,
            ModeSpec::Full => Mode::Full,
        }
    }
}

/// Scenario, condensed QP and tubes, built once and shared by both modes.
pub struct Prepared {
    pub file: ScenarioFile,
    pub scenario: HeatScenario,
    pub cq: CondensedQp,
    pub tubes: crate::reach::ReachTubes,
}

impl Prepared {
    pub fn new(file: &ScenarioFile) -> Result<Self> {
        file.validate()?;
        let scenario = HeatScenario::build(file.heat_params())?;
        let n = scenario.state_dim();
        let m = scenario.input_dim();
        let w = &file.mpc.weights;
        let mut problem = scenario.mpc_problem(file.mpc.horizon)?;
        problem.q = DMatrix::identity(n, n) * w.q;
        problem.r = DMatrix::identity(m, m) * w.r;
        problem.p = DMatrix::identity(n, n) * w.p;
        let cq = CondensedQp::new(problem)?;
        let tubes = scenario.tubes(file.mpc.horizon, file.backward_rule())?;
        Ok(Self {
            file: file.clone(),
            scenario,
            cq,
            tubes,
        })
    }

    pub fn controller(&self, mode: Mode, oracle: bool, execution: Execution) -> Result<Controller> {
        let opts = ControllerOptions {
            mode,
            tol_kkt: self.file.mpc.tol_kkt,
            oracle,
            execution,
            timing_repeats: self.file.run.timing_repeats,
        };
        Controller::new(self.cq.clone(), self.tubes.clone(), opts)
    }

    pub fn simulate(&self, mode: Mode, oracle: bool, steps: usize, execution: Execution) -> Result<SimulationTrace> {
        let mut c = self.controller(mode, oracle, execution)?;
        run(&mut c, &self.initial_state(), steps)
    }

    pub fn initial_state(&self) -> DVector<f64> {
        DVector::from_element(self.scenario.state_dim(), self.file.run.initial_temperature)
    }
}

/// Thread cap for the pre-solve from `CAMPC_THREADS`; `None` when unset.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("CAMPC_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::InvalidArgument(format!("CAMPC_THREADS: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Some(k)),
            _ => Err(Error::InvalidArgument(format!("CAMPC_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

/// Runs `f` with the pre-solve limited to `threads` workers.
pub fn with_thread_cap<T: Send>(threads: Option<usize>, f: impl FnOnce(Execution) -> Result<T> + Send) -> Result<T> {
    match threads {
        Some(1) => f(Execution::Sequential),
        #[cfg(feature = "parallel")]
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
            pool.install(|| f(Execution::Parallel))
        }
        _ => f(Execution::Parallel),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub const TRACE_COLUMNS: [&str; 13] = [
    "n",
    "step",
    "mode",
    "bootstrap",
    "prediction_time",
    "presolve_time",
    "qp_time",
    "total_time",
    "retained_rows",
    "total_rows",
    "retained_fraction",
    "qp_iterations",
    "max_input_delta",
];

/// One row per step: [`TRACE_COLUMNS`], then `max_state_excess` (largest
/// `x_{k+1} - T_max`), then `u_1 .. u_m`.
pub fn write_trace_csv<W: Write>(out: &mut W, n: usize, m: usize, trace: &SimulationTrace, tmax: &DVector<f64>) -> Result<()> {
    let mut header: Vec<String> = TRACE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.push("max_state_excess".into());
    header.extend((1..=m).map(|i| format!("u_{i}")));
    writeln!(out, "{}", header.join(","))?;
    for (rec, next) in trace.steps.iter().zip(trace.states.iter().skip(1)) {
        let t = rec.timings;
        let mut row = vec![
            n.to_string(),
            rec.k.to_string(),
            trace.mode.name().to_string(),
            (rec.bootstrap as u8).to_string(),
            t.prediction.to_string(),
            t.presolve.to_string(),
            t.qp_solve.to_string(),
            t.total.to_string(),
            rec.retained_rows.to_string(),
            rec.total_rows.to_string(),
            rec.retained_fraction().to_string(),
            rec.qp_iterations.to_string(),
            fmt_opt(rec.max_input_delta),
            (next - tmax).max().to_string(),
        ];
        row.extend(rec.u.iter().map(|v| v.to_string()));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub n: usize,
    pub mode: Mode,
    pub steps: usize,
    /// Largest pre-solve + QP time; the ca-MPC bootstrap step is excluded.
    pub max_step_time: f64,
    /// As `max_step_time` but over steps `k >= 1` in both modes.
    pub max_warm_step_time: f64,
    pub max_presolve_time: f64,
    pub max_qp_time: f64,
    pub max_prediction_time: f64,
    pub max_retained_fraction: f64,
    pub max_input_delta: Option<f64>,
}

impl SweepRecord {
    pub fn from_trace(n: usize, trace: &SimulationTrace) -> Self {
        let warm = trace.steps.iter().filter(|s| s.k >= 1);
        Self {
            n,
            mode: trace.mode,
            steps: trace.len(),
            max_step_time: trace.max_controller_time(),
            max_warm_step_time: warm.map(|s| s.timings.controller()).fold(0.0, f64::max),
            max_presolve_time: trace.max_presolve_time(),
            max_qp_time: trace.max_qp_time(),
            max_prediction_time: trace.max_prediction_time(),
            max_retained_fraction: trace
                .steps
                .iter()
                .filter(|s| !s.bootstrap)
                .map(|s| s.retained_fraction())
                .fold(0.0, f64::max),
            max_input_delta: trace.max_input_delta(),
        }
    }
}

pub const SWEEP_COLUMNS: [&str; 11] = [
    "n",
    "mode",
    "steps",
    "max_step_time",
    "max_warm_step_time",
    "max_presolve_time",
    "max_qp_time",
    "max_prediction_time",
    "max_retained_fraction",
    "max_input_delta",
    "speedup",
];

/// `speedup` is filled on ca-MPC rows: full `max_step_time` over ca-MPC `max_step_time`.
pub fn write_sweep_csv<W: Write>(out: &mut W, records: &[SweepRecord]) -> Result<()> {
    writeln!(out, "{}", SWEEP_COLUMNS.join(","))?;
    for r in records {
        let speedup = if r.mode == Mode::Campc {
            speedup(records, r.n)
        } else {
            None
        };
        let row = [
            r.n.to_string(),
            r.mode.name().to_string(),
            r.steps.to_string(),
            r.max_step_time.to_string(),
            r.max_warm_step_time.to_string(),
            r.max_presolve_time.to_string(),
            r.max_qp_time.to_string(),
            r.max_prediction_time.to_string(),
            r.max_retained_fraction.to_string(),
            fmt_opt(r.max_input_delta),
            fmt_opt(speedup),
        ];
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Full over ca-MPC maximum step time at `n`, when both were measured.
pub fn speedup(records: &[SweepRecord], n: usize) -> Option<f64> {
    let find = |mode| records.iter().find(|r| r.n == n && r.mode == mode);
    let (c, f) = (find(Mode::Campc)?, find(Mode::Full)?);
    (c.max_step_time > 0.0).then(|| f.max_step_time / c.max_step_time)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    Campc,
    Full,
    Both,
}

impl SweepMode {
    pub fn modes(self) -> Vec<Mode> {
        match self {
            SweepMode::Campc => vec![Mode::Campc],
            SweepMode::Full => vec![Mode::Full],
            SweepMode::Both => vec![Mode::Campc, Mode::Full],
        }
    }
}

pub struct SweepOptions {
    pub ns: Vec<usize>,
    pub mode: SweepMode,
    /// One run at a time; otherwise each `n` runs on its own thread.
    pub serial: bool,
    pub oracle: bool,
    pub threads: Option<usize>,
}

fn sweep_one(file: &ScenarioFile, n: usize, opts: &SweepOptions) -> Result<Vec<SweepRecord>> {
    let prepared = Prepared::new(&file.with_n(n))?;
    let steps = file.run.steps;
    let mut out = Vec::new();
    for mode in opts.mode.modes() {
        let trace = with_thread_cap(opts.threads, |exec| prepared.simulate(mode, opts.oracle, steps, exec))?;
        log::info!("n = {n}, {}: max step time {:e} s", mode.name(), trace.max_controller_time());
        out.push(SweepRecord::from_trace(n, &trace));
    }
    Ok(out)
}

pub fn sweep(file: &ScenarioFile, opts: &SweepOptions) -> Result<Vec<SweepRecord>> {
    if opts.ns.is_empty() {
        return Err(Error::InvalidArgument("the n list is empty".into()));
    }
    let mut records = Vec::new();
    if opts.serial {
        for &n in &opts.ns {
            records.extend(sweep_one(file, n, opts)?);
        }
    } else {
        let results: Vec<Result<Vec<SweepRecord>>> = std::thread::scope(|s| {
            let handles: Vec<_> = opts.ns.iter().map(|&n| s.spawn(move || sweep_one(file, n, opts))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("sweep worker panicked".into()))))
                .collect()
        });
        for r in results {
            records.extend(r?);
        }
    }
    Ok(records)
}

/// Scenario invariants plus a sampled terminal-invariance check driven by `seed`.
pub fn check(file: &ScenarioFile) -> Result<Vec<CheckResult>> {
    let scenario = HeatScenario::build(file.heat_params())?;
    let mut results = scenario.check();
    results.push(sampled_invariance(&scenario, file.run.seed, 1000));
    Ok(results)
}

/// `A x` stays in `[0, T_terminal]` for `x` sampled from the same box.
pub fn sampled_invariance(s: &HeatScenario, seed: u64, samples: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = s.state_dim();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let x = DVector::from_fn(n, |i, _| s.tterm[i] * rng.random::<f64>());
        let y = s.sys.a() * x;
        let excess = y.iter().zip(s.tterm.iter()).map(|(v, t)| (v - t).max(-v)).fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(excess);
    }
    CheckResult {
        name: "sampled_terminal_invariance",
        passed: worst <= 1e-9 * s.tterm.amax().max(1.0),
        detail: format!("largest excursion over {samples} samples = {worst:e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let s = ScenarioFile::default();
        assert_eq!(ScenarioFile::from_json(&s.to_json()).unwrap(), s);
        assert_eq!(ScenarioFile::from_json("{}").unwrap(), s);
        assert_eq!(s.heat_params(), HeatParams::default());
    }

    #[test]
    fn shipped_scenario_is_the_default() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/hyperthermia.json");
        assert_eq!(ScenarioFile::load(&path).unwrap(), ScenarioFile::default());
    }

    #[test]
    fn schema_errors() {
        let unknown = r#"{"system": {"n": 50, "foo": 1}}"#;
        assert!(matches!(ScenarioFile::from_json(unknown), Err(Error::Parse(_))));
        let negative = r#"{"system": {"alpha": -1.0}}"#;
        let e = ScenarioFile::from_json(negative).unwrap_err();
        assert!(matches!(e, Error::Scenario(_)));
        assert_eq!(e.exit_code(), 1);
        assert!(ScenarioFile::from_json(r#"{"mpc": {"N": 0}}"#).is_err());
        assert!(ScenarioFile::from_json(r#"{"run": {"mode": "fast"}}"#).is_err());
        let ok = r#"{"mpc": {"N": 5, "backward_rule": "perturbation"}, "run": {"mode": "full"}}"#;
        let s = ScenarioFile::from_json(ok).unwrap();
        assert_eq!(s.mpc.horizon, 5);
        assert_eq!(s.mode(), Mode::Full);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Infeasible("x".into()).exit_code(), 2);
        assert_eq!(Error::Numerical("x".into()).exit_code(), 3);
        assert_eq!(Error::InvalidArgument("x".into()).exit_code(), 1);
    }

    #[test]
    fn empty_trace_csv_is_header_only() {
        let p = Prepared::new(&ScenarioFile::default().with_n(20)).unwrap();
        let tr = p.simulate(Mode::Campc, true, 0, Execution::Sequential).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, 20, 2, &tr, &p.scenario.tmax).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("n,step,mode,bootstrap,"));
        assert!(text.trim_end().ends_with("max_state_excess,u_1,u_2"));
    }

    #[test]
    fn trace_csv_is_deterministic_outside_timing_columns() {
        let p = Prepared::new(&ScenarioFile::default().with_n(30)).unwrap();
        let render = || {
            let tr = p.simulate(Mode::Campc, true, 25, Execution::Parallel).unwrap();
            let mut buf = Vec::new();
            write_trace_csv(&mut buf, 30, 2, &tr, &p.scenario.tmax).unwrap();
            String::from_utf8(buf)
                .unwrap()
                .lines()
                .map(|l| {
                    let mut c: Vec<&str> = l.split(',').collect();
                    c.drain(4..8);
                    c.join(",")
                })
                .collect::<Vec<_>>()
        };
        let (a, b) = (render(), render());
        assert_eq!(a, b);
        assert_eq!(a.len(), 26);
        // full precision round trip
        let first_u: f64 = a[1].rsplit(',').nth(1).unwrap().parse().unwrap();
        assert!(first_u.is_finite());
    }

    #[test]
    fn sweep_both_modes_gives_two_rows_per_n() {
        let file = ScenarioFile {
            run: RunSection {
                steps: 5,
                ..RunSection::default()
            },
            ..ScenarioFile::default()
        };
        let opts = SweepOptions {
            ns: vec![20, 30],
            mode: SweepMode::Both,
            serial: false,
            oracle: true,
            threads: Some(1),
        };
        let recs = sweep(&file, &opts).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(speedup(&recs, 20).is_some());
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(recs.iter().all(|r| r.max_input_delta.unwrap() <= 1e-7));
    }

    #[test]
    fn check_default_and_tampered() {
        let results = check(&ScenarioFile::default().with_n(40)).unwrap();
        assert!(results.iter().all(|c| c.passed));
        let mut s = HeatScenario::build(HeatParams::with_n(40)).unwrap();
        // heat flows into node 20 from its neighbours, so A x leaves the box
        s.tterm[20] = 0.0;
        assert!(!sampled_invariance(&s, 3, 500).passed);
        let failed: Vec<_> = s.check().into_iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, vec!["terminal_invariance"]);
    }
}
