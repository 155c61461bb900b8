use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gradadapt::cli::{self, CliError, Overrides, RunSpec};
use gradadapt::harness::TraceFormat;

/// Gradient-based configuration adaptation over synthetic streaming scenes.
#[derive(Debug, Parser)]
#[command(name = "gradadapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one policy over a scenario and write its trace.
    Simulate(Common),
    /// Compare decoupled gradient estimates with the re-inference oracle.
    Gradcheck(Common),
    /// Check the accuracy/utility gradient identity on constructed instances.
    VerifyTheorem(Common),
    /// Run several policies on one scenario under a shared budget.
    Compare(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file; gradcheck accepts several.
    #[arg(long)]
    scenario: Vec<PathBuf>,
    /// Policy name; compare accepts several, comma-separated or repeated.
    #[arg(long, value_delimiter = ',')]
    policy: Vec<String>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    intervals: Option<usize>,
    #[arg(long)]
    mcu_block: Option<usize>,
    /// Back-propagate through every kept frame instead of the last one.
    #[arg(long)]
    no_reuse: bool,
    /// Output file, or directory for compare.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace format: csv or jsonl.
    #[arg(long, default_value = "csv")]
    format: TraceFormat,
    /// Minimum mean cosine similarity for gradcheck.
    #[arg(long)]
    threshold: Option<f64>,
}

impl Common {
    fn into_spec(self) -> RunSpec {
        RunSpec {
            scenarios: self.scenario,
            policies: self.policy,
            overrides: Overrides {
                alpha: self.alpha,
                lambda: self.lambda,
                seed: self.seed,
                intervals: self.intervals,
                mcu_block: self.mcu_block,
                no_reuse: self.no_reuse,
            },
            out: self.out,
            format: self.format,
            threshold: self.threshold,
        }
    }
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match parsed.command {
        Command::Simulate(c) => cli::cmd_simulate(&c.into_spec(), &mut out),
        Command::Gradcheck(c) => cli::cmd_gradcheck(&c.into_spec(), &mut out),
        Command::VerifyTheorem(c) => cli::cmd_verify_theorem(&c.into_spec(), &mut out),
        Command::Compare(c) => cli::cmd_compare(&c.into_spec(), &mut out),
    };
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            report_code(&e)
        }
    }
}

fn report_code(e: &CliError) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
