//! Central finite-difference Jacobian. Test-only fallback: bundled models
//! supply analytic Jacobians, and this is the independent check against them.

use nalgebra::DMatrix;

use crate::dynamics::DynamicsModel;
use crate::Real;

/// Central-difference Jacobian of `f_t` at `state`.
pub fn central_jacobian<M: DynamicsModel + ?Sized>(
    model: &M,
    t: usize,
    state: &[Real],
) -> DMatrix<Real> {
    central_jacobian_eps(model, t, state, 1e-6)
}

pub fn central_jacobian_eps<M: DynamicsModel + ?Sized>(
    model: &M,
    t: usize,
    state: &[Real],
    eps: Real,
) -> DMatrix<Real> {
    let d = model.state_dim();
    let mut jac = DMatrix::zeros(d, d);
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut s = state.to_vec();
    for j in 0..d {
        let h = eps * state[j].abs().max(1.0);
        let orig = s[j];
        s[j] = orig + h;
        model.step(t, &s, &mut plus);
        s[j] = orig - h;
        model.step(t, &s, &mut minus);
        s[j] = orig;
        for i in 0..d {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac
}
