//! Run configuration and the operations behind the `cervid` command-line
//! front end: single evaluations, timing benchmarks, and lambda sweeps, all
//! emitting machine-readable JSON or CSV reports.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deer::{deer_solve, DeerConfig};
use crate::elk::{elk_solve, lambda_sweep, default_lambda_grid, ElkConfig, Inference};
use crate::eval::{mad, sequential_evaluate};
use crate::models::ModelSpec;
use crate::report::SolveReport;
use crate::trace::StateTrace;
use crate::{Error, Mode, Real, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Exit status conventions for the binary.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG_ERROR: i32 = 1;
    pub const NOT_CONVERGED: i32 = 2;
    pub const NUMERICAL_ERROR: i32 = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    Sequential,
    Deer,
    QuasiDeer,
    Elk,
    QuasiElk,
}

impl Solver {
    pub fn mode(self) -> Mode {
        match self {
            Solver::QuasiDeer | Solver::QuasiElk => Mode::Diagonal,
            _ => Mode::Dense,
        }
    }

    pub fn is_elk(self) -> bool {
        matches!(self, Solver::Elk | Solver::QuasiElk)
    }
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Solver::Sequential => "sequential",
            Solver::Deer => "deer",
            Solver::QuasiDeer => "quasi-deer",
            Solver::Elk => "elk",
            Solver::QuasiElk => "quasi-elk",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    #[default]
    Json,
}

fn default_schema() -> u32 {
    CONFIG_SCHEMA_VERSION
}
fn default_tol() -> Real {
    1e-8
}
fn default_reps() -> usize {
    1
}
// 5 warm-up runs before every timing measurement.
fn default_warmup() -> usize {
    5
}

/// One fully-specified run. JSON is the single config format; unknown keys
/// are rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelSpec,
    pub solver: Solver,
    pub t: usize,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub tol: Real,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    /// Damping weight; required for the elk solvers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Real>,
    /// Sweep grid; defaults to 8 log-spaced points 10^0..10^7.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<Real>>,
    #[serde(default)]
    pub inference: Inference,
    /// 0 = host logical-core count, 1 = sequential paths.
    #[serde(default)]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<usize>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default)]
    pub format: Format,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {}",
                self.schema_version
            )));
        }
        if self.t == 0 || self.d == 0 {
            return Err(Error::Config("t and d must be >= 1".into()));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::Config("tol must be positive and finite".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.solver.is_elk() {
            match self.lambda {
                Some(l) if l > 0.0 && l.is_finite() => {}
                Some(l) => {
                    return Err(Error::Config(format!(
                        "lambda must be positive and finite, got {l}"
                    )))
                }
                None => {
                    return Err(Error::Config(format!(
                        "solver {} requires lambda",
                        self.solver
                    )))
                }
            }
        }
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() {
                return Err(Error::Config("lambda_grid must be non-empty".into()));
            }
            if grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
                return Err(Error::Config("lambda_grid values must be positive".into()));
            }
        }
        Ok(())
    }

    fn deer_config(&self, mode: Mode) -> DeerConfig {
        DeerConfig {
            mode,
            max_iters: self.max_iters,
            tol: self.tol,
            workers: self.workers,
            chunk_size: self.chunk_size,
            ..DeerConfig::new(mode)
        }
    }

    fn elk_config(&self, mode: Mode) -> ElkConfig {
        ElkConfig {
            mode,
            lambda: self.lambda.unwrap_or(1.0),
            inference: self.inference,
            max_iters: self.max_iters,
            tol: self.tol,
            workers: self.workers,
            chunk_size: self.chunk_size,
            ..ElkConfig::new(1.0, mode)
        }
    }
}

/// One solver run against a freshly built model instance.
fn run_solver(config: &RunConfig) -> Result<(StateTrace, SolveReport, Real)> {
    let model = config.model.build(config.t, config.d, config.seed)?;
    let truth = sequential_evaluate(model.as_ref(), config.t)?;
    match config.solver {
        Solver::Sequential => {
            let start = Instant::now();
            let trace = sequential_evaluate(model.as_ref(), config.t)?;
            let elapsed = start.elapsed().as_secs_f64();
            let report = SolveReport {
                converged: true,
                total_time: elapsed,
                ..SolveReport::default()
            };
            let discrepancy = mad(&trace, &truth)?;
            Ok((trace, report, discrepancy))
        }
        Solver::Deer | Solver::QuasiDeer => {
            let init = StateTrace::zeros(config.t, config.d);
            let (trace, report) =
                deer_solve(&init, model.as_ref(), &config.deer_config(config.solver.mode()))?;
            let discrepancy = mad(&trace, &truth)?;
            Ok((trace, report, discrepancy))
        }
        Solver::Elk | Solver::QuasiElk => {
            let init = StateTrace::zeros(config.t, config.d);
            let (trace, report) =
                elk_solve(&init, model.as_ref(), &config.elk_config(config.solver.mode()))?;
            let discrepancy = mad(&trace, &truth)?;
            Ok((trace, report, discrepancy))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub schema_version: u32,
    pub build: String,
    pub config: RunConfig,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: Real,
    /// MAD of the converged trace against the sequential oracle.
    pub mad_vs_sequential: Real,
    pub reset_events: Vec<crate::report::ResetEvent>,
    pub nonfinite_iterations: usize,
    pub elem_bytes: u64,
    pub residual_history: Vec<Real>,
    pub merit_history: Vec<Real>,
    pub mad_history: Vec<Real>,
    // Timing fields last; reproducibility comparisons mask them.
    pub wall_ms: f64,
    pub ms_per_iter: f64,
}

/// Runs the configured solver once and reports convergence diagnostics plus
/// the final MAD against the sequential oracle.
pub fn cmd_evaluate(config: &RunConfig) -> Result<EvaluateReport> {
    config.validate()?;
    let (_, report, discrepancy) = run_solver(config)?;
    let out = EvaluateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        build: crate::build_id().to_string(),
        config: config.clone(),
        converged: report.converged,
        iterations: report.iterations,
        final_residual: report.final_residual,
        mad_vs_sequential: discrepancy,
        reset_events: report.reset_events.clone(),
        nonfinite_iterations: report.nonfinite_iterations,
        elem_bytes: report.element_matrix_bytes,
        residual_history: report.residual_norm_history.clone(),
        merit_history: report.merit_history.clone(),
        mad_history: report.mad_history.clone(),
        wall_ms: report.total_time * 1e3,
        ms_per_iter: report.ms_per_iteration(),
    };
    if let Some(path) = &config.output {
        write_evaluate_report(Path::new(path), config.format, &out)?;
    }
    Ok(out)
}

/// One benchmark measurement row. CSV columns are fixed:
/// `solver,T,D,seed,rep,wall_ms,iters,ms_per_iter,elem_bytes,converged`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchRow {
    pub solver: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub seed: u64,
    pub rep: usize,
    pub wall_ms: f64,
    pub iters: usize,
    pub ms_per_iter: f64,
    pub elem_bytes: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub wall_ms_mean: f64,
    pub wall_ms_std: f64,
    pub iters_mean: f64,
    pub iters_std: f64,
    pub ms_per_iter_mean: f64,
    pub ms_per_iter_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub build: String,
    pub config: RunConfig,
    pub rows: Vec<BenchRow>,
    pub aggregate: Aggregate,
}

/// Times `repetitions` runs of the configured solver after `warmup` unrecorded
/// runs. Warmups never appear in the rows or aggregates.
pub fn cmd_benchmark(config: &RunConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    for _ in 0..config.warmup {
        run_solver(config)?;
    }
    let mut rows = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        let start = Instant::now();
        let (_, report, _) = run_solver(config)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        rows.push(BenchRow {
            solver: config.solver.to_string(),
            t: config.t,
            d: config.d,
            seed: config.seed,
            rep,
            wall_ms,
            iters: report.iterations,
            ms_per_iter: report.ms_per_iteration(),
            elem_bytes: report.element_matrix_bytes,
            converged: report.converged,
        });
    }
    let aggregate = Aggregate {
        wall_ms_mean: mean_std(rows.iter().map(|r| r.wall_ms)).0,
        wall_ms_std: mean_std(rows.iter().map(|r| r.wall_ms)).1,
        iters_mean: mean_std(rows.iter().map(|r| r.iters as f64)).0,
        iters_std: mean_std(rows.iter().map(|r| r.iters as f64)).1,
        ms_per_iter_mean: mean_std(rows.iter().map(|r| r.ms_per_iter)).0,
        ms_per_iter_std: mean_std(rows.iter().map(|r| r.ms_per_iter)).1,
    };
    let out = BenchmarkReport {
        schema_version: REPORT_SCHEMA_VERSION,
        build: crate::build_id().to_string(),
        config: config.clone(),
        rows,
        aggregate,
    };
    if let Some(path) = &config.output {
        write_benchmark_report(Path::new(path), config.format, &out)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub lambda: Real,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: Real,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub build: String,
    pub config: RunConfig,
    pub rows: Vec<SweepRow>,
    pub best_lambda: Option<Real>,
}

/// Sweeps the damping weight over the configured (or default) grid.
pub fn cmd_sweep(config: &RunConfig) -> Result<SweepReport> {
    config.validate()?;
    if !config.solver.is_elk() {
        return Err(Error::Config(format!(
            "sweep requires an elk solver, got {}",
            config.solver
        )));
    }
    let grid = config
        .lambda_grid
        .clone()
        .unwrap_or_else(default_lambda_grid);
    let model = config.model.build(config.t, config.d, config.seed)?;
    let init = StateTrace::zeros(config.t, config.d);
    let base = config.elk_config(config.solver.mode());
    let outcome = lambda_sweep(&init, model.as_ref(), &base, &grid)?;
    let rows = outcome
        .runs
        .iter()
        .map(|(lambda, r)| SweepRow {
            lambda: *lambda,
            converged: r.converged,
            iterations: r.iterations,
            final_residual: r.final_residual,
            wall_ms: r.total_time * 1e3,
        })
        .collect();
    let out = SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        build: crate::build_id().to_string(),
        config: config.clone(),
        rows,
        best_lambda: outcome.best_lambda,
    };
    if let Some(path) = &config.output {
        write_sweep_report(Path::new(path), config.format, &out)?;
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_evaluate_report(path: &Path, format: Format, report: &EvaluateReport) -> Result<()> {
    match format {
        Format::Json => write_json(path, report),
        Format::Csv => {
            // Summary row; histories are JSON-only.
            let mut w = csv::Writer::from_path(path)?;
            w.write_record([
                "solver",
                "T",
                "D",
                "seed",
                "converged",
                "iters",
                "final_residual",
                "mad_vs_sequential",
                "wall_ms",
            ])?;
            w.write_record([
                report.config.solver.to_string(),
                report.config.t.to_string(),
                report.config.d.to_string(),
                report.config.seed.to_string(),
                report.converged.to_string(),
                report.iterations.to_string(),
                format!("{:e}", report.final_residual),
                format!("{:e}", report.mad_vs_sequential),
                format!("{}", report.wall_ms),
            ])?;
            w.flush()?;
            Ok(())
        }
    }
}

pub fn write_benchmark_report(path: &Path, format: Format, report: &BenchmarkReport) -> Result<()> {
    match format {
        Format::Json => write_json(path, report),
        Format::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for row in &report.rows {
                w.serialize(row)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

/// Parse a benchmark CSV back into rows (round-trips `write_benchmark_report`).
pub fn read_benchmark_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn write_sweep_report(path: &Path, format: Format, report: &SweepReport) -> Result<()> {
    match format {
        Format::Json => write_json(path, report),
        Format::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for row in &report.rows {
                w.serialize(row)?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Exit code for a finished command, per the documented conventions.
pub fn exit_code_for(converged: bool) -> i32 {
    if converged {
        exit_code::SUCCESS
    } else {
        exit_code::NOT_CONVERGED
    }
}

/// Exit code for an error.
pub fn exit_code_for_error(err: &Error) -> i32 {
    match err {
        Error::Numerical { .. } | Error::DivergedDynamics { .. } => exit_code::NUMERICAL_ERROR,
        _ => exit_code::CONFIG_ERROR,
    }
}
