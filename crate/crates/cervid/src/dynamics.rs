//! The dynamics interface: a time-varying map `f_t` with explicit Jacobians.

use nalgebra::{DMatrix, DVector};

use crate::Real;

/// A nonlinear Markovian transition `f_t : R^D -> R^D` with its Jacobian.
///
/// Time indexing is explicit (`t` runs `1..=T`) so inputs and per-step noise
/// can be absorbed into `f_t` at construction time; solvers never pass a
/// separate input stream. Implementations must be read-only after
/// construction — every method is called concurrently from scan workers.
///
/// Jacobians are supplied analytically. The contract, checked for every
/// bundled model: `jacobian_diag` equals the diagonal of `jacobian`, and
/// `jacobian` matches central finite differences of `step` for smooth models
/// (see `models::fd` for the test-only fallback).
pub trait DynamicsModel: Sync {
    /// State dimension `D`.
    fn state_dim(&self) -> usize;

    /// The fixed initial state `s_0`.
    fn initial_state(&self) -> &[Real];

    /// Writes `f_t(state)` into `out`. `state` and `out` have length `D`.
    fn step(&self, t: usize, state: &[Real], out: &mut [Real]);

    /// Writes the `D x D` Jacobian of `f_t` at `state` into `out`,
    /// row-major: `out[i * D + j] = d f_i / d s_j`.
    fn jacobian(&self, t: usize, state: &[Real], out: &mut [Real]);

    /// Writes the diagonal of the Jacobian into `out` (length `D`) without
    /// materializing the full matrix.
    fn jacobian_diag(&self, t: usize, state: &[Real], out: &mut [Real]);
}

/// `f_t(state)` as an owned vector. Convenience for tests and examples.
pub fn step_owned<M: DynamicsModel + ?Sized>(model: &M, t: usize, state: &[Real]) -> Vec<Real> {
    let mut out = vec![0.0; model.state_dim()];
    model.step(t, state, &mut out);
    out
}

/// The Jacobian of `f_t` at `state` as an owned matrix.
pub fn jacobian_matrix<M: DynamicsModel + ?Sized>(
    model: &M,
    t: usize,
    state: &[Real],
) -> DMatrix<Real> {
    let d = model.state_dim();
    let mut buf = vec![0.0; d * d];
    model.jacobian(t, state, &mut buf);
    DMatrix::from_fn(d, d, |i, j| buf[i * d + j])
}

/// The Jacobian diagonal of `f_t` at `state` as an owned vector.
pub fn jacobian_diag_vector<M: DynamicsModel + ?Sized>(
    model: &M,
    t: usize,
    state: &[Real],
) -> DVector<Real> {
    let d = model.state_dim();
    let mut buf = vec![0.0; d];
    model.jacobian_diag(t, state, &mut buf);
    DVector::from_vec(buf)
}
