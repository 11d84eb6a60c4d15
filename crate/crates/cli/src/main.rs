use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use campc_core::bench::{self, Prepared, ScenarioFile, SweepMode, SweepOptions};
use campc_core::campc::Mode;
use campc_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "campc", version, about = "Constraint-adaptive MPC benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RunMode {
    Campc,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepModeArg {
    Campc,
    Full,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop simulation with one CSV row per step.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Co-solve the full QP every step and record the minimiser difference.
        #[arg(long)]
        oracle: bool,
        /// Overrides `run.mode` from the scenario.
        #[arg(long, value_enum)]
        mode: Option<RunMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Maximum step times over a list of grid sizes.
    Sweep {
        scenario: PathBuf,
        #[arg(long = "n", value_delimiter = ',', required = true)]
        ns: Vec<usize>,
        #[arg(long, value_enum, default_value = "both")]
        mode: SweepModeArg,
        #[arg(long)]
        serial: bool,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate the scenario and its invariants.
    Check { scenario: PathBuf },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_run(scenario: &Path, steps: Option<usize>, oracle: bool, mode: Option<RunMode>, out: Option<&Path>) -> Result<()> {
    let file = ScenarioFile::load(scenario)?;
    let steps = steps.unwrap_or(file.run.steps);
    let oracle = oracle || file.run.oracle;
    let mode = match mode {
        Some(RunMode::Campc) => Mode::Campc,
        Some(RunMode::Full) => Mode::Full,
        None => file.mode(),
    };
    let threads = bench::thread_cap()?;
    let prepared = Prepared::new(&file)?;
    let trace = bench::with_thread_cap(threads, |exec| prepared.simulate(mode, oracle, steps, exec))?;
    let mut w = output(out)?;
    let s = &prepared.scenario;
    bench::write_trace_csv(&mut w, s.state_dim(), s.input_dim(), &trace, &s.tmax)?;
    w.flush()?;
    eprintln!(
        "{} steps, mode {}, max step time {} s, max input delta {}",
        trace.len(),
        mode.name(),
        trace.max_controller_time(),
        trace.max_input_delta().map(|d| d.to_string()).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn cmd_sweep(scenario: &Path, opts: SweepOptions, out: Option<&Path>) -> Result<()> {
    let file = ScenarioFile::load(scenario)?;
    let records = bench::sweep(&file, &opts)?;
    let mut w = output(out)?;
    bench::write_sweep_csv(&mut w, &records)?;
    w.flush()?;
    Ok(())
}

fn cmd_check(scenario: &Path) -> Result<bool> {
    let file = ScenarioFile::load(scenario)?;
    let results = bench::check(&file)?;
    let mut all = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        all &= r.passed;
    }
    Ok(all)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            steps,
            oracle,
            mode,
            out,
        } => cmd_run(&scenario, steps, oracle, mode, out.as_deref()),
        Command::Sweep {
            scenario,
            ns,
            mode,
            serial,
            oracle,
            out,
        } => bench::thread_cap().and_then(|threads| {
            let mode = match mode {
                SweepModeArg::Campc => SweepMode::Campc,
                SweepModeArg::Full => SweepMode::Full,
                SweepModeArg::Both => SweepMode::Both,
            };
            let opts = SweepOptions {
                ns,
                mode,
                serial,
                oracle,
                threads,
            };
            cmd_sweep(&scenario, opts, out.as_deref())
        }),
        Command::Check { scenario } => match cmd_check(&scenario) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Scenario("scenario invariants failed".into())),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
