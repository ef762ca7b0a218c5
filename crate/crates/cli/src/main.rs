use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdpmpc_cli::{report_diff, DiffOptions, ExperimentConfig, Plan, RunError};

#[derive(Parser)]
#[command(name = "mdpmpc", version, about = "Run MDP/MPC equivalence experiments and compare reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the config and exit without running or writing anything.
        #[arg(long)]
        check: bool,
    },
    /// Compare two reports field by field.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        atol: f64,
        #[arg(long, default_value_t = 0.0)]
        rtol: f64,
    },
}

fn run(config: PathBuf, output_dir: Option<PathBuf>, seed: Option<u64>, check: bool) -> Result<bool, RunError> {
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = output_dir.unwrap_or_else(|| cfg.output_dir.clone());
    let plan = Plan::new(&cfg)?;
    if check {
        println!("{}: config ok, output to {}", plan.kind, dir.display());
        return Ok(true);
    }
    let outcome = plan.execute()?;
    outcome.write(&dir)?;
    print!("{}", outcome.report.summary());
    println!("report written to {}", dir.join(mdpmpc_cli::REPORT_FILE).display());
    Ok(outcome.report.passed)
}

fn read_json(path: &PathBuf) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            output_dir,
            seed,
            check,
        } => match run(config, output_dir, seed, check) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Diff { a, b, atol, rtol } => {
            let (a, b) = match (read_json(&a), read_json(&b)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            match report_diff(&a, &b, &DiffOptions { atol, rtol }) {
                Ok(text) => {
                    println!("{text}");
                    if text == "no differences" {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
