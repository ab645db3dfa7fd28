//! ELK and quasi-ELK: trust-region-damped Newton via Kalman inference.
//!
//! Each iteration builds the LGSSM of the damped linearized problem (see
//! [`lgssm`]) and takes its posterior means as the next iterate. Filtering
//! is the default inference (cheaper, and empirically converges in fewer
//! iterations — consistent with the prefix-first convergence of the
//! undamped iteration); the RTS smoother is the exact Levenberg-Marquardt
//! minimizer and is kept for the correspondence tests. The damping weight
//! is held constant across iterations and chosen by [`lambda_sweep`] over a
//! log-spaced grid.
//!
//! Unlike DEER there is no reset heuristic: bounded steps are the point.
//! An iterate that still manages to go non-finite aborts the solve (it can
//! never recover, since the next emissions would contain the bad values).

mod flat;
mod kalman;
mod lgssm;

pub use kalman::{
    dense_elements, diag_elements, kalman_filter_parallel, kalman_filter_sequential,
    kalman_smoother, Covariances, DiagKalmanElement, FilterResult, KalmanScanElement,
};
pub use lgssm::{build_lgssm, DynBlocks, Lgssm};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsModel;
use crate::eval::{mad_flat, residual_into};
use crate::exec::Exec;
use crate::report::SolveReport;
use crate::trace::StateTrace;
use crate::{Error, Mode, Real, Result};

/// Which posterior statistic serves as the iterate update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Inference {
    #[default]
    Filter,
    Smoother,
}

impl std::fmt::Display for Inference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Inference::Filter => write!(f, "filter"),
            Inference::Smoother => write!(f, "smoother"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElkConfig {
    /// Damping weight (emission precision). Larger is safer but slower.
    pub lambda: Real,
    pub mode: Mode,
    pub inference: Inference,
    /// Iteration cap; `None` defaults to `T`.
    pub max_iters: Option<usize>,
    /// Convergence threshold on the max-abs residual (shared with DEER for
    /// comparable iteration counts).
    pub tol: Real,
    pub record_history: bool,
    /// Worker threads (0 = all cores, 1 = sequential filter oracle).
    pub workers: usize,
    pub chunk_size: Option<usize>,
}

impl ElkConfig {
    pub fn new(lambda: Real, mode: Mode) -> Self {
        ElkConfig {
            lambda,
            mode,
            inference: Inference::Filter,
            max_iters: None,
            tol: 1e-8,
            record_history: true,
            workers: 1,
            chunk_size: None,
        }
    }

    pub fn with_tol(mut self, tol: Real) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = Some(n);
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_inference(mut self, inference: Inference) -> Self {
        self.inference = inference;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive and finite, got {}",
                self.lambda
            )));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::InvalidParameter("tol must be positive and finite".into()));
        }
        if self.max_iters == Some(0) {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// One damped Newton step: the posterior means of the step LGSSM.
///
/// With `inference = Smoother` this is the exact minimizer of the damped
/// linearized objective; the filter variant is the cheaper default.
pub fn elk_step<M: DynamicsModel + ?Sized>(
    trace: &StateTrace,
    model: &M,
    lambda: Real,
    mode: Mode,
    inference: Inference,
) -> Result<StateTrace> {
    let g = build_lgssm(trace, model, lambda, mode)?;
    match inference {
        Inference::Filter => Ok(kalman_filter_sequential(&g)?.means),
        Inference::Smoother => kalman_smoother(&g),
    }
}

/// Runs (quasi-)ELK from `initial` to the residual tolerance. Never resets;
/// non-convergence is reported, not an error.
pub fn elk_solve<M: DynamicsModel + ?Sized>(
    initial: &StateTrace,
    model: &M,
    config: &ElkConfig,
) -> Result<(StateTrace, SolveReport)> {
    config.validate()?;
    if initial.dim() != model.state_dim() {
        return Err(Error::shape("elk_solve", model.state_dim(), initial.dim()));
    }
    let t = initial.len();
    let d = initial.dim();
    let mut exec = Exec::new(config.workers)?;
    if let Some(c) = config.chunk_size {
        exec = exec.with_chunk_size(c);
    }
    let max_iters = config.max_iters.unwrap_or(t);
    let word = std::mem::size_of::<Real>();
    // Mode-dependent per-step matrix storage of the inference path: the
    // sequential filter keeps T covariances, the scan keeps (A, C, J).
    let elem_bytes = |parallel: bool| -> u64 {
        let per_step = match (parallel, config.mode) {
            (true, Mode::Dense) => 3 * d * d,
            (true, Mode::Diagonal) => 3 * d,
            (false, Mode::Dense) => d * d,
            (false, Mode::Diagonal) => d,
        };
        (t * per_step * word) as u64
    };

    let mut s = initial.clone();
    let mut prev = vec![0.0; t * d];
    let mut resid = vec![0.0; t * d];
    let mut report = SolveReport::default();
    let start = Instant::now();
    let mut iters = 0usize;
    let mut rnorm;

    // Packed relinearization + filter buffers for the sequential-filter path.
    let mut flat_g = flat::FlatLgssm::new(config.mode, d, t);
    let mut flat_scratch = flat::FilterScratch::new(d);
    let mut flat_out = vec![0.0; t * d];

    loop {
        if !s.is_all_finite() {
            report.nonfinite_iterations += 1;
            rnorm = Real::NAN;
            break;
        }
        residual_into(&s, model, &mut resid, &exec);
        rnorm = resid.iter().fold(0.0 as Real, |m, v| m.max(v.abs()));
        if iters > 0 && config.record_history {
            report.residual_norm_history.push(rnorm);
            report
                .merit_history
                .push(0.5 * resid.iter().map(|v| v * v).sum::<Real>());
            report.mad_history.push(mad_flat(s.as_slice(), &prev));
        }
        if rnorm <= config.tol {
            report.converged = true;
            break;
        }
        if iters >= max_iters {
            break;
        }

        match config.inference {
            Inference::Smoother => {
                let g = build_lgssm(&s, model, config.lambda, config.mode)?;
                report.element_matrix_bytes = report.element_matrix_bytes.max(elem_bytes(false));
                prev.copy_from_slice(s.as_slice());
                s = kalman_smoother(&g)?;
            }
            Inference::Filter if exec.is_parallel() => {
                let g = build_lgssm(&s, model, config.lambda, config.mode)?;
                let f = kalman_filter_parallel(&g, &exec)?;
                report.ridge_activations += f.ridge_activations;
                report.element_matrix_bytes = report.element_matrix_bytes.max(elem_bytes(true));
                prev.copy_from_slice(s.as_slice());
                s = f.means;
            }
            Inference::Filter => {
                flat_g.rebuild(&s, model, config.lambda, &exec);
                report.element_matrix_bytes = report.element_matrix_bytes.max(elem_bytes(false));
                flat::filter_means_flat(&flat_g, &s, &mut flat_out, &mut flat_scratch)?;
                prev.copy_from_slice(s.as_slice());
                s.as_mut_slice().copy_from_slice(&flat_out);
            }
        }
        iters += 1;
    }

    report.iterations = iters;
    report.final_residual = rnorm;
    report.total_time = start.elapsed().as_secs_f64();
    report.wall_time_per_iteration = if iters > 0 {
        report.total_time / iters as f64
    } else {
        0.0
    };
    Ok((s, report))
}

/// Log-spaced default grid `10^0 ..= 10^7` (8 points).
pub fn default_lambda_grid() -> Vec<Real> {
    (0..8).map(|e| (10.0 as Real).powi(e)).collect()
}

/// Outcome of a sweep: the per-lambda reports and the winner (fewest
/// iterations among converged runs, ties to the smaller lambda).
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub best_lambda: Option<Real>,
    pub runs: Vec<(Real, SolveReport)>,
}

/// Runs `elk_solve` for each grid value.
pub fn lambda_sweep<M: DynamicsModel + ?Sized>(
    initial: &StateTrace,
    model: &M,
    config: &ElkConfig,
    grid: &[Real],
) -> Result<SweepOutcome> {
    if grid.is_empty() {
        return Err(Error::Empty("lambda_sweep: empty grid"));
    }
    let mut sorted: Vec<Real> = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-comparable lambda"));

    let mut runs = Vec::with_capacity(sorted.len());
    let mut best: Option<(Real, usize)> = None;
    for &lambda in &sorted {
        let cfg = ElkConfig {
            lambda,
            ..config.clone()
        };
        let (_, report) = elk_solve(initial, model, &cfg)?;
        if report.converged {
            let better = match best {
                // Strict comparison on an ascending grid keeps the smallest
                // lambda among ties.
                Some((_, it)) => report.iterations < it,
                None => true,
            };
            if better {
                best = Some((lambda, report.iterations));
            }
        }
        runs.push((lambda, report));
    }
    Ok(SweepOutcome {
        best_lambda: best.map(|(l, _)| l),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deer::{deer_solve, deer_step, DeerConfig};
    use crate::eval::{mad, sequential_evaluate};
    use crate::models::{ArGru, Gru, TanhDynamics};

    #[test]
    fn step_fixes_true_trace() {
        let m = Gru::random(4, 4, 24, 3);
        let truth = sequential_evaluate(&m, 24).unwrap();
        for lambda in [1e-6, 1.0, 1e6] {
            let out = elk_step(&truth, &m, lambda, Mode::Dense, Inference::Filter).unwrap();
            assert!(mad(&out, &truth).unwrap() < 1e-8, "lambda {lambda}");
        }
    }

    #[test]
    fn tiny_lambda_smoother_is_newton_step() {
        for seed in 0..3 {
            let m = Gru::random(4, 4, 64, 50 + seed);
            let init = StateTrace::from_fn(64, 4, |k, j| ((k * 4 + j) as Real * 0.3).sin() * 0.5);
            let newton = deer_step(&init, &m, Mode::Dense).unwrap();
            let damped = elk_step(&init, &m, 1e-10, Mode::Dense, Inference::Smoother).unwrap();
            let worst = newton
                .as_slice()
                .iter()
                .zip(damped.as_slice())
                .fold(0.0 as Real, |w, (a, b)| w.max((a - b).abs()));
            assert!(worst < 1e-5, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn huge_lambda_takes_no_step() {
        let m = Gru::random(4, 4, 32, 9);
        let init = StateTrace::from_fn(32, 4, |k, j| ((k + j) as Real).cos() * 0.3);
        let out = elk_step(&init, &m, 1e12, Mode::Dense, Inference::Filter).unwrap();
        let worst = out
            .as_slice()
            .iter()
            .zip(init.as_slice())
            .fold(0.0 as Real, |w, (a, b)| w.max((a - b).abs()));
        assert!(worst < 1e-4, "step too large: {worst}");
    }

    #[test]
    fn step_size_shrinks_with_lambda() {
        for seed in 0..10 {
            let m = Gru::random(3, 3, 24, 70 + seed);
            let init = StateTrace::from_fn(24, 3, |k, j| ((k * 3 + j) as Real * 1.1).sin());
            let mut last = Real::INFINITY;
            for e in -3..=3 {
                let lambda = (10.0 as Real).powi(e);
                let out = elk_step(&init, &m, lambda, Mode::Dense, Inference::Smoother).unwrap();
                let sq: Real = out
                    .as_slice()
                    .iter()
                    .zip(init.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let norm = sq.sqrt();
                assert!(
                    norm <= last * (1.0 + 1e-9),
                    "seed {seed}: step grew from {last} to {norm} at lambda {lambda}"
                );
                last = norm;
            }
        }
    }

    #[test]
    fn solves_untrained_argru() {
        let m = ArGru::random(3, 200, 12);
        let truth = sequential_evaluate(&m, 200).unwrap();
        let init = StateTrace::zeros(200, 4);
        for mode in [Mode::Dense, Mode::Diagonal] {
            let cfg = ElkConfig::new(1.0, mode);
            let (out, report) = elk_solve(&init, &m, &cfg).unwrap();
            assert!(report.converged, "{mode}");
            assert!(mad(&out, &truth).unwrap() < 1e-6, "{mode}");
            assert_eq!(report.nonfinite_iterations, 0);
        }
    }

    #[test]
    fn solve_from_truth_stops_immediately() {
        let m = Gru::random(3, 3, 16, 2);
        let truth = sequential_evaluate(&m, 16).unwrap();
        let (out, report) = elk_solve(&truth, &m, &ElkConfig::new(1.0, Mode::Dense)).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 1);
        assert_eq!(out.as_slice(), truth.as_slice());
    }

    #[test]
    fn stiff_tanh_elk_stable_where_deer_resets() {
        // Desk-size version of the stability contrast. A gain-5 recurrence
        // needs T log10(5) > 308 to overflow f64, hence the length.
        let t = 768;
        let m = TanhDynamics::random(4, 5.0, 0);
        let truth = sequential_evaluate(&m, t).unwrap();
        let init = StateTrace::zeros(t, 4);

        let (_, deer_report) =
            deer_solve(&init, &m, &DeerConfig::new(Mode::Dense).with_max_iters(50)).unwrap();
        assert!(
            !deer_report.reset_events.is_empty(),
            "expected undamped Newton to overflow on gain-5 dynamics"
        );

        let cfg = ElkConfig::new(1.0, Mode::Dense).with_max_iters(4000);
        let (out, elk_report) = elk_solve(&init, &m, &cfg).unwrap();
        assert!(elk_report.converged);
        assert_eq!(elk_report.nonfinite_iterations, 0);
        assert!(mad(&out, &truth).unwrap() < 1e-6);
    }

    #[test]
    fn sweep_picks_a_winner_on_argru() {
        let m = ArGru::random(3, 96, 21);
        let init = StateTrace::zeros(96, 4);
        let cfg = ElkConfig::new(1.0, Mode::Dense);
        let out = lambda_sweep(&init, &m, &cfg, &default_lambda_grid()).unwrap();
        assert_eq!(out.runs.len(), 8);
        let best = out.best_lambda.expect("at least one grid point converges");
        // Winner must be optimal and the smallest among optima.
        let best_iters = out
            .runs
            .iter()
            .find(|(l, _)| *l == best)
            .map(|(_, r)| r.iterations)
            .unwrap();
        for (l, r) in &out.runs {
            if r.converged {
                assert!(best_iters <= r.iterations);
                if r.iterations == best_iters {
                    assert!(best <= *l);
                }
            }
        }
    }

    #[test]
    fn sweep_single_point_grid() {
        let m = Gru::random(3, 3, 32, 5);
        let init = StateTrace::zeros(32, 3);
        let out = lambda_sweep(&init, &m, &ElkConfig::new(1.0, Mode::Dense), &[0.5]).unwrap();
        assert_eq!(out.best_lambda, Some(0.5));
        assert!(lambda_sweep(&init, &m, &ElkConfig::new(1.0, Mode::Dense), &[]).is_err());
    }

    #[test]
    fn rejects_invalid_lambda() {
        let m = Gru::random(3, 3, 8, 5);
        let init = StateTrace::zeros(8, 3);
        for bad in [0.0, -1.0, Real::NAN, Real::INFINITY] {
            assert!(elk_solve(&init, &m, &ElkConfig::new(bad, Mode::Dense)).is_err());
        }
    }

    #[test]
    fn parallel_filter_solve_matches_sequential_solve() {
        let m = ArGru::random(3, 128, 8);
        let init = StateTrace::zeros(128, 4);
        let base = ElkConfig::new(1.0, Mode::Dense).with_tol(1e-12);
        let (a, ra) = elk_solve(&init, &m, &base).unwrap();
        let (b, rb) = elk_solve(&init, &m, &base.clone().with_workers(4)).unwrap();
        assert!(ra.converged && rb.converged);
        assert!(mad(&a, &b).unwrap() < 1e-11);
    }
}
