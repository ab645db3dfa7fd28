//! DEER and quasi-DEER: undamped Newton iteration on the trace residual.
//!
//! Each iteration linearizes the fixed-point equation around the current
//! iterate and solves the resulting block-bidiagonal system by forward
//! substitution, which is the first-order linear recurrence
//!
//! ```text
//! ds_1 = -r_1,      ds_t = J_t ds_{t-1} - r_t   (J_t = df_t/ds at s_{t-1})
//! ```
//!
//! evaluated for all `t` at once by an inclusive affine scan. With finite
//! Jacobians the iteration reaches the exact solution in at most `T` steps
//! from any initialization, because iterate `i` already agrees with the
//! solution on the first `i` steps (the first element of the recurrence is
//! exact, and correctness propagates one step per iteration). Replacing the
//! Jacobians by their diagonals (quasi-DEER) keeps that guarantee while
//! cutting the scan to element-wise work.
//!
//! The same prefix property underwrites the reset heuristic: when the linear
//! recurrence overflows (the scan deliberately lets non-finite values
//! through), the already-converged prefix is still intact, so overwriting
//! the bad entries with a finite value and continuing loses nothing but
//! time.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsModel;
use crate::eval::{mad_flat, residual_into};
use crate::exec::Exec;
use crate::report::{ResetEvent, SolveReport};
use crate::scan::{inclusive_scan_in_place, ElementSeq};
use crate::trace::StateTrace;
use crate::{Error, Mode, Real, Result};

/// What to overwrite when an iterate contains non-finite entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResetPolicy {
    /// Overwrite only the non-finite entries (default; preserves every
    /// finite value, in particular the converged prefix).
    #[default]
    NonFiniteOnly,
    /// Overwrite the whole suffix starting at the first bad row.
    Suffix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeerConfig {
    /// Dense Jacobians (DEER) or their diagonals (quasi-DEER).
    pub mode: Mode,
    /// Iteration cap. `None` defaults to `T`, stretched to `10 T` once the
    /// reset heuristic fires (every reset effectively restarts a suffix).
    pub max_iters: Option<usize>,
    /// Convergence threshold on the max-abs residual.
    pub tol: Real,
    /// Value written over non-finite entries by the reset heuristic.
    pub reset_value: Real,
    pub reset_policy: ResetPolicy,
    /// Record per-iteration histories in the report.
    pub record_history: bool,
    /// Worker threads for the scan and residual evaluation; 0 = all cores,
    /// 1 = strictly sequential.
    pub workers: usize,
    /// Scan chunk override (default `max(T / (8 workers), 64)`).
    pub chunk_size: Option<usize>,
}

impl DeerConfig {
    pub fn new(mode: Mode) -> Self {
        DeerConfig {
            mode,
            max_iters: None,
            tol: 1e-8,
            reset_value: 0.0,
            reset_policy: ResetPolicy::NonFiniteOnly,
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

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::InvalidParameter("tol must be positive and finite".into()));
        }
        if self.max_iters == Some(0) {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !self.reset_value.is_finite() {
            return Err(Error::InvalidParameter("reset_value must be finite".into()));
        }
        Ok(())
    }
}

impl Default for DeerConfig {
    fn default() -> Self {
        DeerConfig::new(Mode::Dense)
    }
}

/// Fills `elems` with the affine elements of the Newton linear solve:
/// element 0 is `(0, -r_1)` (the initial condition `ds_1 = -r_1`), element
/// `k >= 1` is `(J_{k+1} at s_k, -r_{k+1})`.
fn build_elements_into<M: DynamicsModel + ?Sized>(
    trace: &StateTrace,
    model: &M,
    resid: &[Real],
    elems: &mut ElementSeq,
    exec: &Exec,
) {
    use rayon::prelude::*;
    let d = trace.dim();
    let len = trace.len();
    let mode = elems.mode();
    let a_stride = match mode {
        Mode::Dense => d * d,
        Mode::Diagonal => d,
    };

    let fill = |k: usize, a: &mut [Real], b: &mut [Real]| {
        if k == 0 {
            a.fill(0.0);
        } else {
            match mode {
                Mode::Dense => model.jacobian(k + 1, trace.row(k - 1), a),
                Mode::Diagonal => model.jacobian_diag(k + 1, trace.row(k - 1), a),
            }
        }
        for (o, r) in b.iter_mut().zip(&resid[k * d..(k + 1) * d]) {
            *o = -r;
        }
    };

    if exec.is_parallel() && len > 1 {
        let chunk = exec.chunk_size(len);
        let (a_buf, b_buf) = (&mut elems.a, &mut elems.b);
        exec.install(|| {
            a_buf
                .par_chunks_mut(chunk * a_stride)
                .zip(b_buf.par_chunks_mut(chunk * d))
                .enumerate()
                .for_each(|(ci, (a_chunk, b_chunk))| {
                    let base = ci * chunk;
                    for (r, (a, b)) in a_chunk
                        .chunks_mut(a_stride)
                        .zip(b_chunk.chunks_mut(d))
                        .enumerate()
                    {
                        fill(base + r, a, b);
                    }
                });
        });
    } else {
        for k in 0..len {
            let (a_head, b_head) = (&mut elems.a, &mut elems.b);
            fill(
                k,
                &mut a_head[k * a_stride..(k + 1) * a_stride],
                &mut b_head[k * d..(k + 1) * d],
            );
        }
    }
}

/// The affine scan elements encoding one Newton linear solve at `trace`.
///
/// Errors if the trace has non-finite entries; the solver resets those
/// before calling in here.
pub fn build_elements<M: DynamicsModel + ?Sized>(
    trace: &StateTrace,
    model: &M,
    mode: Mode,
) -> Result<ElementSeq> {
    if trace.dim() != model.state_dim() {
        return Err(Error::shape("build_elements", model.state_dim(), trace.dim()));
    }
    if let Some(row) = trace.first_nonfinite_row() {
        return Err(Error::NonFinite {
            context: "build_elements",
            row,
        });
    }
    let exec = Exec::sequential();
    let mut resid = vec![0.0; trace.len() * trace.dim()];
    residual_into(trace, model, &mut resid, &exec);
    let mut elems = ElementSeq::zeros(mode, trace.dim(), trace.len());
    build_elements_into(trace, model, &resid, &mut elems, &exec);
    Ok(elems)
}

/// One Newton (or quasi-Newton) update: `s + ds` with `ds` from the scan.
///
/// In dense mode this is the exact Newton iterate; on affine dynamics it
/// lands on the solution in a single application.
pub fn deer_step<M: DynamicsModel + ?Sized>(
    trace: &StateTrace,
    model: &M,
    mode: Mode,
) -> Result<StateTrace> {
    let mut elems = build_elements(trace, model, mode)?;
    inclusive_scan_in_place(&mut elems, &Exec::sequential())?;
    let mut out = trace.clone();
    for k in 0..out.len() {
        let delta = elems.b_part(k);
        for (s, dv) in out.row_mut(k).iter_mut().zip(delta) {
            *s += dv;
        }
    }
    Ok(out)
}

/// Largest `k` such that the residual rows `0..k` are all within `tol`.
///
/// After `i` dense iterations without resets this is at least `i` — the
/// prefix-correctness property that also powers the reset heuristic.
pub fn prefix_converged_len<M: DynamicsModel + ?Sized>(
    trace: &StateTrace,
    model: &M,
    tol: Real,
) -> Result<usize> {
    let r = crate::eval::residual(trace, model)?;
    let d = r.dim();
    for k in 0..r.len() {
        let row_ok = r.row(k).iter().all(|v| v.abs() <= tol);
        if !row_ok {
            return Ok(k);
        }
        let _ = d;
    }
    Ok(r.len())
}

/// Applies the reset policy in place. Returns the first bad row, if any.
fn apply_reset(trace: &mut StateTrace, policy: ResetPolicy, value: Real) -> Option<usize> {
    let first_bad = trace.first_nonfinite_row()?;
    match policy {
        ResetPolicy::NonFiniteOnly => {
            for v in trace.as_mut_slice().iter_mut() {
                if !v.is_finite() {
                    *v = value;
                }
            }
        }
        ResetPolicy::Suffix => {
            let d = trace.dim();
            let from = first_bad * d;
            trace.as_mut_slice()[from..].fill(value);
        }
    }
    Some(first_bad)
}

/// Runs (quasi-)DEER from `initial` until the max-abs residual is within
/// `config.tol` or the iteration budget runs out. Non-convergence is
/// reported, not an error.
pub fn deer_solve<M: DynamicsModel + ?Sized>(
    initial: &StateTrace,
    model: &M,
    config: &DeerConfig,
) -> Result<(StateTrace, SolveReport)> {
    config.validate()?;
    if initial.dim() != model.state_dim() {
        return Err(Error::shape("deer_solve", model.state_dim(), initial.dim()));
    }
    let t = initial.len();
    let d = initial.dim();
    let mut exec = Exec::new(config.workers)?;
    if let Some(c) = config.chunk_size {
        exec = exec.with_chunk_size(c);
    }

    let mut s = initial.clone();
    let mut prev = vec![0.0; t * d];
    let mut resid = vec![0.0; t * d];
    let mut elems = ElementSeq::zeros(config.mode, d, t);

    let mut report = SolveReport {
        element_matrix_bytes: elems.matrix_bytes(),
        ..SolveReport::default()
    };
    let start = Instant::now();
    let mut iters = 0usize;
    let mut rnorm;

    loop {
        if let Some(first_bad) = apply_reset(&mut s, config.reset_policy, config.reset_value) {
            report.reset_events.push(ResetEvent {
                iteration: iters,
                first_bad_row: first_bad,
            });
            report.nonfinite_iterations += 1;
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
        let budget = match config.max_iters {
            Some(n) => n,
            None if report.reset_events.is_empty() => t,
            None => 10 * t,
        };
        if iters >= budget {
            break;
        }

        build_elements_into(&s, model, &resid, &mut elems, &exec);
        inclusive_scan_in_place(&mut elems, &exec)?;
        prev.copy_from_slice(s.as_slice());
        for k in 0..t {
            let delta = elems.b_part(k);
            for (sv, dv) in s.row_mut(k).iter_mut().zip(delta) {
                *sv += dv;
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
    debug_assert!(!report.converged || s.is_all_finite());
    Ok((s, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{mad, residual, sequential_evaluate};
    use crate::models::{Affine, Gru};
    use nalgebra::{DMatrix, DVector};

    fn scalar_decay() -> Affine {
        Affine::new(
            DMatrix::from_element(1, 1, 0.5),
            DVector::zeros(1),
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn elements_of_true_trace_have_zero_offsets() {
        let m = Gru::random(4, 4, 16, 3);
        let truth = sequential_evaluate(&m, 16).unwrap();
        let elems = build_elements(&truth, &m, Mode::Dense).unwrap();
        let worst = elems.b.iter().fold(0.0 as Real, |a, v| a.max(v.abs()));
        assert!(worst < 1e-12);
    }

    #[test]
    fn elements_hand_example() {
        // f(s) = 0.5 s, s_0 = 1, trace [1, 1]: elements (0, -0.5), (0.5, -0.5).
        let m = scalar_decay();
        let trace = StateTrace::from_flat(2, 1, vec![1.0, 1.0]).unwrap();
        let elems = build_elements(&trace, &m, Mode::Dense).unwrap();
        assert_eq!(elems.a_part(0), &[0.0]);
        assert_eq!(elems.b_part(0), &[-0.5]);
        assert_eq!(elems.a_part(1), &[0.5]);
        assert_eq!(elems.b_part(1), &[-0.5]);
    }

    #[test]
    fn elements_reject_nonfinite_trace() {
        let m = scalar_decay();
        let mut trace = StateTrace::zeros(2, 1);
        trace.row_mut(1)[0] = Real::INFINITY;
        assert!(matches!(
            build_elements(&trace, &m, Mode::Dense),
            Err(Error::NonFinite { row: 1, .. })
        ));
    }

    #[test]
    fn diag_elements_match_dense_diagonals() {
        let m = Gru::random(5, 5, 12, 9);
        let trace = StateTrace::from_fn(12, 5, |k, j| ((k * 5 + j) as Real * 0.37).sin());
        let dense = build_elements(&trace, &m, Mode::Dense).unwrap();
        let diag = build_elements(&trace, &m, Mode::Diagonal).unwrap();
        for k in 1..12 {
            let da = dense.a_part(k);
            let ga = diag.a_part(k);
            for i in 0..5 {
                assert!((da[i * 5 + i] - ga[i]).abs() < 1e-14);
            }
            assert_eq!(dense.b_part(k), diag.b_part(k));
        }
    }

    #[test]
    fn step_fixes_exact_solution() {
        let m = Gru::random(3, 3, 10, 4);
        let truth = sequential_evaluate(&m, 10).unwrap();
        let stepped = deer_step(&truth, &m, Mode::Dense).unwrap();
        assert!(mad(&stepped, &truth).unwrap() < 1e-14);
    }

    #[test]
    fn step_scalar_hand_example() {
        // From [1, 1]: ds_1 = -0.5, ds_2 = 0.5 * (-0.5) - 0.5 = -0.75.
        let m = scalar_decay();
        let trace = StateTrace::from_flat(2, 1, vec![1.0, 1.0]).unwrap();
        let out = deer_step(&trace, &m, Mode::Dense).unwrap();
        assert!((out.row(0)[0] - 0.5).abs() < 1e-15);
        assert!((out.row(1)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn one_dense_step_solves_affine_exactly() {
        for seed in 0..5 {
            let m = Affine::random(4, 0.6, seed);
            let truth = sequential_evaluate(&m, 32).unwrap();
            let init = StateTrace::from_fn(32, 4, |k, j| ((k + j) as Real * 1.7).cos() * 3.0);
            let stepped = deer_step(&init, &m, Mode::Dense).unwrap();
            let r = residual(&stepped, &m).unwrap();
            assert!(r.max_abs() < 1e-10, "seed {seed}: {}", r.max_abs());
            assert!(mad(&stepped, &truth).unwrap() < 1e-10);
        }
    }

    #[test]
    fn solve_from_truth_converges_immediately() {
        let m = Gru::random(4, 4, 8, 11);
        let truth = sequential_evaluate(&m, 8).unwrap();
        let (out, report) = deer_solve(&truth, &m, &DeerConfig::new(Mode::Dense)).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 1);
        assert_eq!(out.as_slice(), truth.as_slice());
    }

    #[test]
    fn solve_untrained_gru_matches_oracle() {
        let m = Gru::random(16, 16, 256, 0);
        let truth = sequential_evaluate(&m, 256).unwrap();
        let init = StateTrace::zeros(256, 16);
        for mode in [Mode::Dense, Mode::Diagonal] {
            let (out, report) = deer_solve(&init, &m, &DeerConfig::new(mode)).unwrap();
            assert!(report.converged, "{mode} did not converge");
            assert!(report.iterations <= 256);
            assert!(mad(&out, &truth).unwrap() < 1e-8, "{mode}");
            assert!(report.final_residual <= 1e-8);
        }
    }

    #[test]
    fn every_seed_yields_a_convergent_problem() {
        // Random initialization at D=16 always produces a solvable instance.
        for seed in 0..20 {
            let m = Gru::random(16, 16, 64, seed);
            let init = StateTrace::zeros(64, 16);
            let (_, report) = deer_solve(&init, &m, &DeerConfig::new(Mode::Dense)).unwrap();
            assert!(report.converged, "seed {seed}");
        }
    }

    #[test]
    fn concurrent_solves_on_distinct_problems() {
        let a = Gru::random(4, 4, 64, 1);
        let b = Gru::random(4, 4, 64, 2);
        let init = StateTrace::zeros(64, 4);
        let cfg = DeerConfig::new(Mode::Dense);
        std::thread::scope(|scope| {
            let ha = scope.spawn(|| deer_solve(&init, &a, &cfg).unwrap());
            let hb = scope.spawn(|| deer_solve(&init, &b, &cfg).unwrap());
            assert!(ha.join().unwrap().1.converged);
            assert!(hb.join().unwrap().1.converged);
        });
    }

    #[test]
    fn quasi_needs_at_least_as_many_iterations_mostly() {
        let mut quasi_wins = 0;
        for seed in 0..20 {
            let m = Gru::random(8, 8, 64, seed);
            let init = StateTrace::zeros(64, 8);
            let (_, dense) = deer_solve(&init, &m, &DeerConfig::new(Mode::Dense)).unwrap();
            let (_, diag) = deer_solve(&init, &m, &DeerConfig::new(Mode::Diagonal)).unwrap();
            assert!(dense.converged && diag.converged);
            if diag.iterations < dense.iterations {
                quasi_wins += 1;
            }
        }
        assert!(quasi_wins <= 2, "diagonal beat dense {quasi_wins}/20 times");
    }

    #[test]
    fn histories_have_iteration_length() {
        let m = Gru::random(4, 4, 32, 2);
        let init = StateTrace::zeros(32, 4);
        let (_, report) = deer_solve(&init, &m, &DeerConfig::new(Mode::Dense)).unwrap();
        assert!(report.iterations > 0);
        assert_eq!(report.residual_norm_history.len(), report.iterations);
        assert_eq!(report.merit_history.len(), report.iterations);
        assert_eq!(report.mad_history.len(), report.iterations);
        let last = *report.residual_norm_history.last().unwrap();
        assert_eq!(last, report.final_residual);
    }

    #[test]
    fn nonconvergence_is_reported_not_thrown() {
        let m = Gru::random(4, 4, 64, 6);
        let init = StateTrace::zeros(64, 4);
        let cfg = DeerConfig::new(Mode::Dense).with_max_iters(1);
        let (_, report) = deer_solve(&init, &m, &cfg).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 1);
    }

    #[test]
    fn prefix_len_counts_leading_converged_rows() {
        let m = Gru::random(4, 4, 32, 8);
        let truth = sequential_evaluate(&m, 32).unwrap();
        assert_eq!(prefix_converged_len(&truth, &m, 1e-10).unwrap(), 32);

        let init = StateTrace::zeros(32, 4);
        let stepped = deer_step(&init, &m, Mode::Dense).unwrap();
        assert!(prefix_converged_len(&stepped, &m, 1e-8).unwrap() >= 1);
    }

    #[test]
    fn reset_heuristic_recovers_from_nonfinite_init() {
        let m = Gru::random(4, 4, 16, 13);
        let mut init = StateTrace::zeros(16, 4);
        init.row_mut(3)[2] = Real::NAN;
        init.row_mut(9)[0] = Real::INFINITY;
        let (out, report) = deer_solve(&init, &m, &DeerConfig::new(Mode::Dense)).unwrap();
        assert!(report.converged);
        assert_eq!(report.reset_events.len(), 1);
        assert_eq!(report.reset_events[0].first_bad_row, 3);
        assert!(out.is_all_finite());
    }

    #[test]
    fn suffix_reset_clears_whole_tail() {
        let mut trace = StateTrace::from_fn(6, 2, |_, _| 1.0);
        trace.row_mut(2)[1] = Real::NAN;
        apply_reset(&mut trace, ResetPolicy::Suffix, 0.0);
        assert_eq!(trace.row(1), &[1.0, 1.0]);
        for k in 2..6 {
            assert_eq!(trace.row(k), &[0.0, 0.0]);
        }
    }

    #[test]
    fn parallel_and_sequential_solves_agree() {
        let m = Gru::random(8, 8, 200, 21);
        let init = StateTrace::zeros(200, 8);
        let cfg1 = DeerConfig::new(Mode::Dense).with_tol(1e-12);
        let mut cfg4 = cfg1.clone().with_workers(4);
        cfg4.chunk_size = Some(17);
        let (a, ra) = deer_solve(&init, &m, &cfg1).unwrap();
        let (b, rb) = deer_solve(&init, &m, &cfg4).unwrap();
        assert!(ra.converged && rb.converged);
        let worst = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .fold(0.0 as Real, |w, (x, y)| w.max((x - y).abs()));
        assert!(worst < 1e-12, "worker counts disagree by {worst}");
    }
}
