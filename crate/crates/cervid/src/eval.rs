//! Residuals, the sequential oracle, and the merit function.
//!
//! These are the defining quantities of the fixed-point formulation: a
//! candidate trace is the solution iff its residual vanishes, and the merit
//! function `0.5 * ||r||^2` has no stationary point other than that solution
//! (its gradient is `J^T r` with `J` unit-triangular, hence nonsingular).

use rayon::prelude::*;

use crate::dynamics::DynamicsModel;
use crate::exec::Exec;
use crate::trace::{ResidualTrace, StateTrace};
use crate::{Error, Real, Result};

fn check_dims<M: DynamicsModel + ?Sized>(
    context: &'static str,
    trace: &StateTrace,
    model: &M,
) -> Result<()> {
    if trace.dim() != model.state_dim() {
        return Err(Error::shape(context, model.state_dim(), trace.dim()));
    }
    Ok(())
}

/// Writes the residual of `trace` into `out` (flat row-major `T x D`).
///
/// Row `k` of the output is `s_{k+1} - f_{k+1}(s_k)`, with `s_0` taken from
/// the model. Shapes must already be validated.
pub(crate) fn residual_into<M: DynamicsModel + ?Sized>(
    trace: &StateTrace,
    model: &M,
    out: &mut [Real],
    exec: &Exec,
) {
    let d = trace.dim();
    let len = trace.len();
    debug_assert_eq!(out.len(), len * d);

    let eval_row = |k: usize, out_row: &mut [Real]| {
        let prev = if k == 0 {
            model.initial_state()
        } else {
            trace.row(k - 1)
        };
        model.step(k + 1, prev, out_row);
        let cur = trace.row(k);
        for j in 0..d {
            out_row[j] = cur[j] - out_row[j];
        }
    };

    if exec.is_parallel() && len > 1 {
        let chunk = exec.chunk_size(len);
        exec.install(|| {
            out.par_chunks_mut(chunk * d)
                .enumerate()
                .for_each(|(ci, out_chunk)| {
                    let base = ci * chunk;
                    for (r, out_row) in out_chunk.chunks_mut(d).enumerate() {
                        eval_row(base + r, out_row);
                    }
                });
        });
    } else {
        for (k, out_row) in out.chunks_mut(d).enumerate() {
            eval_row(k, out_row);
        }
    }
}

/// The one-step residual `r_t = s_t - f_t(s_{t-1})` of a candidate trace.
///
/// Non-finite entries in the trace propagate into the residual; only shape
/// mismatches are errors.
pub fn residual<M: DynamicsModel + ?Sized>(
    trace: &StateTrace,
    model: &M,
) -> Result<ResidualTrace> {
    check_dims("residual", trace, model)?;
    let mut out = vec![0.0; trace.len() * trace.dim()];
    residual_into(trace, model, &mut out, &Exec::sequential());
    Ok(ResidualTrace::from_flat(trace.len(), trace.dim(), out))
}

/// Applies `f_t` sequentially `T` times from `s_0`: the ground-truth oracle.
///
/// Errors with the first bad row if the dynamics produce a non-finite state.
pub fn sequential_evaluate<M: DynamicsModel + ?Sized>(model: &M, len: usize) -> Result<StateTrace> {
    if len == 0 {
        return Err(Error::InvalidParameter(
            "sequential_evaluate: T must be >= 1".into(),
        ));
    }
    let d = model.state_dim();
    let mut trace = StateTrace::zeros(len, d);
    let mut prev: Vec<Real> = model.initial_state().to_vec();
    for k in 0..len {
        let row = trace.row_mut(k);
        model.step(k + 1, &prev, row);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedDynamics { row: k });
        }
        prev.copy_from_slice(row);
    }
    Ok(trace)
}

/// The merit value `0.5 * ||r(s)||^2` summed over all `T * D` entries.
pub fn merit<M: DynamicsModel + ?Sized>(trace: &StateTrace, model: &M) -> Result<Real> {
    Ok(residual(trace, model)?.half_squared_norm())
}

/// The merit gradient `J(s)^T r(s)`, computed blockwise.
///
/// The full `TD x TD` Jacobian is never materialized: row `k` of the result
/// is `r_{k+1} - (df_{k+2}/ds at s_{k+1})^T r_{k+2}`, and the last row is
/// just the last residual.
pub fn merit_gradient<M: DynamicsModel + ?Sized>(
    trace: &StateTrace,
    model: &M,
) -> Result<StateTrace> {
    check_dims("merit_gradient", trace, model)?;
    let d = trace.dim();
    let len = trace.len();
    let r = residual(trace, model)?;

    let mut grad = StateTrace::zeros(len, d);
    let mut jac = vec![0.0; d * d];
    for k in 0..len {
        let out = grad.row_mut(k);
        out.copy_from_slice(r.row(k));
    }
    for k in 0..len - 1 {
        // Subtract J_{k+2}^T r_{k+2}, the coupling through the next step.
        model.jacobian(k + 2, trace.row(k), &mut jac);
        let r_next = r.row(k + 1);
        let out = grad.row_mut(k);
        for j in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                acc += jac[i * d + j] * r_next[i];
            }
            out[j] -= acc;
        }
    }
    Ok(grad)
}

/// Mean absolute discrepancy between two traces of identical shape.
pub fn mad(a: &StateTrace, b: &StateTrace) -> Result<Real> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::shape(
            "mad",
            format!("{}x{}", a.len(), a.dim()),
            format!("{}x{}", b.len(), b.dim()),
        ));
    }
    let n = (a.len() * a.dim()) as Real;
    let sum: Real = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / n)
}

/// Mean absolute difference between two flat buffers (solver-internal).
pub(crate) fn mad_flat(a: &[Real], b: &[Real]) -> Real {
    let sum: Real = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    sum / a.len() as Real
}
