use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mpfc::log::{compute_metrics, ClosedLoopLog, Limits, Summary};
use mpfc::scenario::{run_scenario, Scenario};
use mpfc::{acceptance, Error};

/// Model predictive path-following control of a simulated three-joint arm.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario in closed loop.
    Run {
        /// Scenario file, or the name of a built-in scenario (clover, hello).
        scenario: String,
        /// Write the per-sample log here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write summary metrics here as JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Add the solver wall time column to the log (breaks bit-identical output).
        #[arg(long)]
        timing: bool,
    },
    /// Summarize a log written by `run`.
    Metrics {
        csv: PathBuf,
        /// Rows before this time (s) are excluded from error and rate statistics.
        #[arg(long)]
        settle: f64,
        #[arg(long, default_value_t = 60.0)]
        tau_bar: f64,
        #[arg(long, default_value_t = 0.6)]
        qdot_bar: f64,
    },
    /// Run the acceptance suite.
    Check,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    scenario: &'a str,
    completed: bool,
    error: Option<String>,
    #[serde(flatten)]
    metrics: Option<Summary>,
}

fn load(arg: &str) -> Result<Scenario, Error> {
    let p = Path::new(arg);
    if !p.exists() && Scenario::builtin_names().contains(&arg) {
        Scenario::builtin(arg)
    } else {
        Scenario::load(p)
    }
}

fn run(scenario: &str, out: Option<PathBuf>, summary: Option<PathBuf>, timing: bool) -> Result<bool, Error> {
    let sc = load(scenario)?;
    let outcome = run_scenario(&sc)?;
    if let Some(out) = out {
        outcome.log.write_csv(BufWriter::new(File::create(out)?), timing)?;
    }
    let limits = Limits::new(sc.ocp.tau_bar, sc.ocp.qdot_bar);
    let metrics = compute_metrics(&outcome.log, sc.settle_time, &limits).ok();
    let report = RunSummary {
        scenario: &sc.name,
        completed: outcome.error.is_none(),
        error: outcome.error.as_ref().map(|e| e.to_string()),
        metrics,
    };
    let json = serde_json::to_string_pretty(&report).expect("summary serializes");
    match summary {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    if let Some(e) = outcome.error {
        eprintln!("error: {e}");
        return Ok(false);
    }
    Ok(true)
}

fn metrics(csv: &Path, settle: f64, tau_bar: f64, qdot_bar: f64) -> Result<(), Error> {
    let log = ClosedLoopLog::read_csv(File::open(csv)?, &csv.display().to_string())?;
    let s = compute_metrics(&log, settle, &Limits::new(tau_bar, qdot_bar))?;
    println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors are faults (1); clap's own code 2 is reserved for failed acceptance.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            summary,
            timing,
        } => run(&scenario, out, summary, timing).map(|ok| if ok { 0 } else { 1 }),
        Command::Metrics {
            csv,
            settle,
            tau_bar,
            qdot_bar,
        } => metrics(&csv, settle, tau_bar, qdot_bar).map(|_| 0),
        Command::Check => acceptance::run_all().map(|report| {
            for line in report.lines() {
                println!("{line}");
            }
            if report.all_passed() {
                0
            } else {
                2
            }
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
