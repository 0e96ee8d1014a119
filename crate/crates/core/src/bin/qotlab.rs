use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use qotlab::experiment::{generate, run_experiment, ExperimentConfig, GenerateSpec};
use qotlab::Error;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "qotlab",
    version,
    about = "Regularised transport experiments and support-bound checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep ε on one instance and write reports, rate fits and plots.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Comma-separated ε list replacing the configured one.
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        /// Marginal residual tolerance of the dual solver.
        #[arg(long)]
        tol: Option<f64>,
        /// Output directory replacing the configured one.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write measure files for instance families.
    Gen {
        #[arg(short, long)]
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

/// Prints a one-line JSON record on stderr and returns the exit code.
fn fail(code: u8, kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message, "exit_code": code }));
    ExitCode::from(code)
}

fn fail_with(err: Error) -> ExitCode {
    let code = if err.is_convergence() {
        EXIT_CONVERGENCE
    } else {
        EXIT_CONFIG
    };
    fail(code, err.kind(), err.to_string())
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("QOTLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("QOTLAB_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(config: &Path, eps: Option<Vec<f64>>, tol: Option<f64>, out: Option<PathBuf>) -> ExitCode {
    let text = match fs::read_to_string(config) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, "io", format!("{}: {e}", config.display())),
    };
    let mut cfg = match ExperimentConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => return fail_with(e),
    };
    if let Some(list) = eps {
        cfg.eps_list = list;
    }
    if let Some(t) = tol {
        cfg.solver.residual_tol = t;
    }
    if let Some(dir) = out {
        cfg.output_dir = match std::env::current_dir() {
            Ok(cwd) => cwd.join(dir),
            Err(e) => return fail(EXIT_CONFIG, "io", e.to_string()),
        };
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let outcome = match run_experiment(&cfg, base) {
        Ok(o) => o,
        Err(e) => return fail_with(e),
    };
    let failed: Vec<_> = outcome.failures().collect();
    println!(
        "{}",
        json!({
            "reports": outcome.reports.len(),
            "failed": failed.len(),
            "rates": outcome.rates.len(),
            "output_dir": base.join(&cfg.output_dir),
        })
    );
    if failed.is_empty() {
        return ExitCode::SUCCESS;
    }
    for r in &failed {
        eprintln!(
            "{}",
            json!({
                "error": "check_failed",
                "bound_id": r.bound_id,
                "instance": r.context.instance,
                "epsilon": r.context.epsilon,
                "variant": r.context.variant,
                "lhs": r.lhs,
                "rhs": r.rhs,
            })
        );
    }
    fail(
        EXIT_CHECK_FAILED,
        "check_failed",
        format!("{} explicit-constant checks failed", failed.len()),
    )
}

fn gen(spec: &Path, out: &Path) -> ExitCode {
    let parsed = fs::read_to_string(spec)
        .map_err(Error::from)
        .and_then(|t| serde_json::from_str::<GenerateSpec>(&t).map_err(|e| Error::InvalidConfig(e.to_string())));
    let spec = match parsed {
        Ok(s) => s,
        Err(e) => return fail_with(e),
    };
    match generate(&spec, out) {
        Ok(names) => {
            for n in names {
                println!("{n}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail_with(e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => return fail(EXIT_CONFIG, "usage", e.to_string()),
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    if let Err(msg) = configure_threads() {
        return fail(EXIT_CONFIG, "invalid_config", msg);
    }
    match cli.command {
        Command::Run { config, eps, tol, out } => run(&config, eps, tol, out),
        Command::Gen { spec, out } => gen(&spec, &out),
    }
}
