//! Per-solve diagnostics shared by the DEER and ELK solvers.

use serde::{Deserialize, Serialize};

use crate::Real;

/// One application of the reset heuristic: at the start of `iteration`
/// (0-based count of completed solver steps), non-finite entries were found
/// starting at trace row `first_bad_row` and overwritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResetEvent {
    pub iteration: usize,
    pub first_bad_row: usize,
}

/// Convergence diagnostics for one solver run.
///
/// Histories have length `iterations` when recording is enabled; entry `i`
/// describes the iterate after step `i + 1` (residual and merit are measured
/// after any reset has been applied, `mad` is against the previous iterate).
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SolveReport {
    pub iterations: usize,
    pub converged: bool,
    /// Max-abs residual of the final iterate.
    pub final_residual: Real,
    pub residual_norm_history: Vec<Real>,
    pub merit_history: Vec<Real>,
    pub mad_history: Vec<Real>,
    pub reset_events: Vec<ResetEvent>,
    /// Iterations whose iterate contained non-finite values (ELK never
    /// resets, so for ELK this counts would-be reset events; for DEER it
    /// equals `reset_events.len()`).
    pub nonfinite_iterations: usize,
    /// Ridge regularizations applied inside Kalman combines (ELK only).
    pub ridge_activations: usize,
    /// Mean wall time per iteration, seconds.
    pub wall_time_per_iteration: f64,
    /// Total solve wall time, seconds.
    pub total_time: f64,
    /// Bytes of mode-dependent per-element matrix storage held by the inner
    /// linear solve (`T * D^2 * 8` dense vs `T * D * 8` diagonal).
    pub element_matrix_bytes: u64,
}

impl SolveReport {
    /// `wall_time_per_iteration` in milliseconds.
    pub fn ms_per_iteration(&self) -> f64 {
        self.wall_time_per_iteration * 1e3
    }
}
