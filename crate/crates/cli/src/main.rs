use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use splitnet::experiment::{emit_tradeoff_table, format_tradeoff_text, read_results, run_experiment_file};

#[derive(Parser)]
#[command(name = "splitnet", version, about = "Split-model training and communication-accuracy sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (scheme, C, q, seed) tuple of a TOML experiment config.
    Run {
        config: PathBuf,
        /// Suppress per-row progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Aggregate a results table over seeds.
    Report {
        results: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Run the built-in invariant and oracle checks.
    Check,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
}

fn run(config: PathBuf, quiet: bool) -> Result<()> {
    let out = run_experiment_file(&config, &mut |r| {
        if !quiet {
            eprintln!(
                "{} {} C={} q={} seed={}: accuracy {:.4}, {} bits/inference",
                r.scheme, r.dataset, r.c, r.q, r.seed, r.accuracy, r.bits_per_inference
            );
        }
    })
    .with_context(|| format!("running {}", config.display()))?;
    print!("{}", format_tradeoff_text(&out.rows));
    eprintln!("wrote {}, {} and {}", out.results.display(), out.tradeoff.display(), out.manifest.display());
    Ok(())
}

fn report(results: PathBuf, format: Format) -> Result<()> {
    let rows = read_results(&results).with_context(|| format!("reading {}", results.display()))?;
    let stdout = std::io::stdout();
    match format {
        Format::Csv => emit_tradeoff_table(&rows, stdout.lock())?,
        Format::Table => stdout.lock().write_all(format_tradeoff_text(&rows).as_bytes())?,
    }
    Ok(())
}

fn check() -> Result<()> {
    let outcomes = splitnet::checks::run_all();
    for c in &outcomes {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = outcomes.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", outcomes.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, quiet } => run(config, quiet),
        Command::Report { results, format } => report(results, format),
        Command::Check => check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
