use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shifteq::model::Variant;
use shifteq::Shift2D;
use shifteq_cli::{
    bench, bench_sane, demo_rows, emit, env_seed, render_bench, render_demo, run_audit, CliError, Format, RunConfig,
    EXIT_BAD_CONFIG, EXIT_SUITE_FAILED,
};

/// Shift-equivariance audits for vision-transformer building blocks.
///
/// Exit codes: 0 success, 1 a suite missed its expectation, 2 bad
/// configuration or I/O error.
#[derive(Parser)]
#[command(name = "shifteq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the suites listed in a JSON config and write a report.
    Audit {
        #[arg(long)]
        config: PathBuf,
        /// Report destination; defaults to the config's output path, then stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Compare baseline and anchored logits on an input and its shift.
    Demo {
        #[arg(long, default_value = "vit")]
        variant: Variant,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, num_args = 2, value_names = ["DY", "DX"], allow_negative_numbers = true, default_values_t = [1, 1])]
        shift: Vec<i64>,
    },
    /// Time anchor, window_attention_poly and gsa_poly across grid sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn audit(
    config: PathBuf,
    out: Option<PathBuf>,
    format: Option<Format>,
    seed: Option<u64>,
    trials: Option<usize>,
) -> Result<i32, CliError> {
    let mut cfg = RunConfig::load(&config)?;
    if let Some(t) = trials {
        cfg.trials = t;
    }
    let seed = cfg.resolve_seed(seed)?;
    let report = run_audit(&cfg, seed)?;
    let text = report.render(format.unwrap_or(cfg.output.format))?;
    emit(&text, out.as_deref().or(cfg.output.path.as_deref()))?;
    for o in &report.outcomes {
        let verdict = match (o.meets_expectation, o.expect_failure) {
            (true, false) => "pass",
            (true, true) => "fails as expected",
            (false, false) => "FAIL",
            (false, true) => "FAIL (expected a counterexample)",
        };
        eprintln!("{:<32} {verdict}", o.suite);
    }
    Ok(report.exit_code())
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Audit { config, out, format, seed, trials } => audit(config, out, format, seed, trials),
        Command::Demo { variant, seed, shift } => {
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let g = Shift2D::new(shift[0], shift[1]);
            print!("{}", render_demo(&demo_rows(variant, seed, g)?, seed, g));
            Ok(0)
        }
        Command::Bench { sizes, reps } => {
            let rows = bench(&sizes, reps)?;
            print!("{}", render_bench(&rows));
            if bench_sane(&rows) {
                Ok(0)
            } else {
                eprintln!("anchoring took longer than a full anchored operator");
                Ok(EXIT_SUITE_FAILED)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_BAD_CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("shifteq: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
