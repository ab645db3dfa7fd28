use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cervid::cli::{self, exit_code, Format, RunConfig};

/// Parallel evaluation of nonlinear recurrent state-space models.
#[derive(Parser)]
#[command(name = "cervid", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one solver and report convergence against the sequential oracle.
    Evaluate(CommonArgs),
    /// Time repeated solver runs (after warmup) and emit per-rep rows.
    Benchmark(CommonArgs),
    /// Sweep the damping weight over a log-spaced grid.
    Sweep(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Report destination (overrides the config).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Report format (overrides the config).
    #[arg(long, value_parser = parse_format)]
    format: Option<Format>,
    /// Worker threads (overrides the config; 0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Model seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_format(s: &str) -> Result<Format, String> {
    match s {
        "csv" => Ok(Format::Csv),
        "json" => Ok(Format::Json),
        other => Err(format!("unknown format {other:?} (expected csv or json)")),
    }
}

fn load_config(args: &CommonArgs) -> Result<RunConfig, cervid::Error> {
    let mut cfg = RunConfig::from_path(&args.config)?;
    if let Some(out) = &args.output {
        cfg.output = Some(out.to_string_lossy().into_owned());
    }
    if let Some(fmt) = args.format {
        cfg.format = fmt;
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: &Command) -> Result<i32, cervid::Error> {
    match command {
        Command::Evaluate(args) => {
            let cfg = load_config(args)?;
            let report = cli::cmd_evaluate(&cfg)?;
            eprintln!(
                "{}: converged={} iters={} residual={:.3e} mad={:.3e}",
                cfg.solver,
                report.converged,
                report.iterations,
                report.final_residual,
                report.mad_vs_sequential
            );
            Ok(cli::exit_code_for(report.converged))
        }
        Command::Benchmark(args) => {
            let cfg = load_config(args)?;
            let report = cli::cmd_benchmark(&cfg)?;
            eprintln!(
                "{}: {} reps, wall {:.3} +/- {:.3} ms, {:.1} iters avg",
                cfg.solver,
                report.rows.len(),
                report.aggregate.wall_ms_mean,
                report.aggregate.wall_ms_std,
                report.aggregate.iters_mean
            );
            Ok(cli::exit_code_for(report.rows.iter().all(|r| r.converged)))
        }
        Command::Sweep(args) => {
            let cfg = load_config(args)?;
            let report = cli::cmd_sweep(&cfg)?;
            for row in &report.rows {
                eprintln!(
                    "lambda={:>10.3e} converged={} iters={}",
                    row.lambda, row.converged, row.iterations
                );
            }
            match report.best_lambda {
                Some(best) => {
                    eprintln!("selected lambda = {best:e}");
                    Ok(exit_code::SUCCESS)
                }
                None => {
                    eprintln!("no grid point converged");
                    Ok(exit_code::NOT_CONVERGED)
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code_for_error(&err) as u8)
        }
    }
}
