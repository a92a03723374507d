use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unibio_core::harness::{fit_loglog_slope, list_problems, run_experiment, ExperimentConfig};
use unibio_core::trace::read_rows;

#[derive(Debug, Parser)]
#[command(name = "unibio", version, about = "Bilevel optimization experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (p, algorithm, seed) job of a config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides `run.out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of seeds (overrides `run.seeds`).
        #[arg(long)]
        seeds: Option<u64>,
        /// Worker threads, 0 for all cores (overrides `run.parallel`).
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Fit a log-log slope to the running-average column of a trace.
    Slope {
        trace: PathBuf,
        /// Inclusive iteration window `A:B`; defaults to the last 90% of the trace.
        #[arg(long, value_parser = parse_window)]
        window: Option<(u64, u64)>,
    },
    /// List the built-in problems.
    ListProblems,
}

fn parse_window(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected A:B, got `{s}`"))?;
    let a = a.trim().parse().map_err(|_| format!("bad window start `{a}`"))?;
    let b = b.trim().parse().map_err(|_| format!("bad window end `{b}`"))?;
    if a > b {
        return Err(format!("empty window {a}:{b}"));
    }
    Ok((a, b))
}

fn run(cli: Cli) -> unibio_core::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            parallel,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(out) = out {
                cfg.run.out = out;
            }
            if let Some(seeds) = seeds {
                cfg.run.seeds = seeds;
            }
            if let Some(parallel) = parallel {
                cfg.run.parallel = parallel;
            }
            let report = run_experiment(&cfg)?;
            println!(
                "{:<14} {:>4} {:<8} {:>5} {:>14} {:>14} {:>9}",
                "problem", "p", "algo", "runs", "final_avg", "best_avg", "slope"
            );
            for a in &report.aggregates {
                let slope = a.median_slope.map_or("-".to_string(), |s| format!("{s:.4}"));
                println!(
                    "{:<14} {:>4} {:<8} {:>5} {:>14.6e} {:>14.6e} {:>9}",
                    a.problem, a.p, a.algo, a.runs, a.median_final_avg, a.median_best_avg, slope
                );
            }
            println!("wrote {} traces to {}", report.records.len(), report.out_dir.display());
        }
        Command::Slope { trace, window } => {
            let rows = read_rows(BufReader::new(File::open(&trace)?))?;
            let fit = fit_loglog_slope(&rows, window)?;
            println!(
                "slope={:.6} intercept={:.6} r_squared={:.6} window={}:{}",
                fit.slope, fit.intercept, fit.r_squared, fit.window.0, fit.window.1
            );
        }
        Command::ListProblems => {
            for info in list_problems() {
                println!("{:<14} {}", info.name, info.description);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
