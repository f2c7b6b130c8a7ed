//! `distillkit` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or flags, 2 runtime failure
//! (including a failed gradient check or a diverged run).

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use distillkit::Error;

const THREADS_ENV: &str = "DISTILLKIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "distillkit", version, about = "Feature-distillation losses, detection evaluation and seed statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate detections against ground truth (JSON-lines inputs).
    Eval(commands::EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Run the demo over a list of settings and seeds and compare them.
    Sweep(commands::SweepArgs),
    /// Time a kernel or the evaluator.
    Bench(commands::BenchArgs),
    /// Train on a synthetic teacher/student pair and write the trajectory.
    Demo(commands::DemoArgs),
    /// Summaries and paired tests from a per-seed metrics CSV.
    Stats(commands::StatsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Cwd,
    Mgd,
}

/// How a command ended, mapped onto the exit-code contract.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Invalid(_) => 1,
            Self::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Invalid(m) | Self::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::Io(_) => Self::Runtime(e.to_string()),
            _ => Self::Invalid(e.to_string()),
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Invalid(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Bench(a) => commands::bench(a),
        Command::Demo(a) => commands::demo(a),
        Command::Stats(a) => commands::stats(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
