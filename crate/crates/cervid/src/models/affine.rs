//! Affine test dynamics (Newton is exact on these) and the stiff saturating
//! dynamics used by the stability suite.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::math::{at, gemv_acc};
use crate::dynamics::DynamicsModel;
use crate::{Error, Real, Result};

/// `f(s) = A s + c`: exactly one dense Newton step solves it from anywhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Affine {
    a: DMatrix<Real>,
    c: DVector<Real>,
    initial: Vec<Real>,
}

impl Affine {
    pub fn new(a: DMatrix<Real>, c: DVector<Real>, initial: Vec<Real>) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || c.len() != d || initial.len() != d {
            return Err(Error::InvalidParameter("affine dims inconsistent".into()));
        }
        Ok(Affine { a, c, initial })
    }

    /// Random instance rescaled to the requested spectral radius.
    pub fn random(dim: usize, spectral_radius: Real, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(dim, dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal) as Real
        });
        let rho = estimate_spectral_radius(&raw).max(1e-12);
        let a = raw * (spectral_radius / rho);
        let c = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal) as Real);
        let initial = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as Real)
            .collect();
        Affine { a, c, initial }
    }

    pub fn matrix(&self) -> &DMatrix<Real> {
        &self.a
    }
}

impl DynamicsModel for Affine {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn initial_state(&self) -> &[Real] {
        &self.initial
    }

    fn step(&self, _t: usize, state: &[Real], out: &mut [Real]) {
        out.copy_from_slice(self.c.as_slice());
        gemv_acc(out, &self.a, state);
    }

    fn jacobian(&self, _t: usize, _state: &[Real], out: &mut [Real]) {
        let d = self.a.nrows();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = at(&self.a, i, j);
            }
        }
    }

    fn jacobian_diag(&self, _t: usize, _state: &[Real], out: &mut [Real]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = at(&self.a, i, i);
        }
    }
}

/// `f(s) = tanh(gain * (W s + b))`.
///
/// Bounded outputs, but the Jacobian near the origin has spectral radius of
/// roughly `gain * rho(W)`; with `gain` well above one the Newton linear
/// recurrence overflows on long sequences, which is what the stability suite
/// exercises.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TanhDynamics {
    w: DMatrix<Real>,
    b: DVector<Real>,
    gain: Real,
    initial: Vec<Real>,
}

impl TanhDynamics {
    pub fn new(w: DMatrix<Real>, b: DVector<Real>, gain: Real, initial: Vec<Real>) -> Result<Self> {
        let d = w.nrows();
        if w.ncols() != d || b.len() != d || initial.len() != d {
            return Err(Error::InvalidParameter("tanh dynamics dims inconsistent".into()));
        }
        if !gain.is_finite() {
            return Err(Error::InvalidParameter("non-finite gain".into()));
        }
        Ok(TanhDynamics { w, b, gain, initial })
    }

    /// Random instance: `W` entries `N(0, 1/D)` (spectral radius near one),
    /// so the effective local gain is about `gain`.
    pub fn random(dim: usize, gain: Real, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = 1.0 / (dim as Real).sqrt();
        let w = DMatrix::from_fn(dim, dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal) as Real * sd
        });
        let b = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal) as Real * 0.1);
        let initial = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as Real * 0.5)
            .collect();
        TanhDynamics {
            w,
            b,
            gain,
            initial,
        }
    }

    fn preactivation(&self, state: &[Real], out: &mut [Real]) {
        out.copy_from_slice(self.b.as_slice());
        gemv_acc(out, &self.w, state);
        for v in out.iter_mut() {
            *v *= self.gain;
        }
    }
}

impl DynamicsModel for TanhDynamics {
    fn state_dim(&self) -> usize {
        self.w.nrows()
    }

    fn initial_state(&self) -> &[Real] {
        &self.initial
    }

    fn step(&self, _t: usize, state: &[Real], out: &mut [Real]) {
        self.preactivation(state, out);
        for v in out.iter_mut() {
            *v = v.tanh();
        }
    }

    fn jacobian(&self, _t: usize, state: &[Real], out: &mut [Real]) {
        let d = self.w.nrows();
        let mut act = vec![0.0; d];
        self.preactivation(state, &mut act);
        for v in act.iter_mut() {
            *v = v.tanh();
        }
        for i in 0..d {
            let gi = self.gain * (1.0 - act[i] * act[i]);
            for j in 0..d {
                out[i * d + j] = gi * at(&self.w, i, j);
            }
        }
    }

    fn jacobian_diag(&self, _t: usize, state: &[Real], out: &mut [Real]) {
        let d = self.w.nrows();
        let mut act = vec![0.0; d];
        self.preactivation(state, &mut act);
        for i in 0..d {
            let f = act[i].tanh();
            out[i] = self.gain * (1.0 - f * f) * at(&self.w, i, i);
        }
    }
}

/// Spectral radius `max |lambda_i|`.
fn estimate_spectral_radius(a: &DMatrix<Real>) -> Real {
    a.complex_eigenvalues()
        .iter()
        .fold(0.0, |m, l| m.max(l.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::fd;

    #[test]
    fn identity_dynamics_are_fixed() {
        let m = Affine::new(DMatrix::identity(2, 2), DVector::zeros(2), vec![1.0, -2.0]).unwrap();
        let t = crate::eval::sequential_evaluate(&m, 4).unwrap();
        for k in 0..4 {
            assert_eq!(t.row(k), &[1.0, -2.0]);
        }
    }

    #[test]
    fn random_affine_hits_requested_radius() {
        let m = Affine::random(6, 0.5, 3);
        let rho = estimate_spectral_radius(m.matrix());
        assert!((rho - 0.5).abs() < 0.05, "sigma_max = {rho}");
    }

    #[test]
    fn unstable_affine_trace_grows() {
        // Spectral radius 1.5: sequential trace magnitude grows roughly as rho^t.
        let m = Affine::random(4, 1.5, 7);
        let t = crate::eval::sequential_evaluate(&m, 30).unwrap();
        let early = t.row(4).iter().fold(0.0 as Real, |a, v| a.max(v.abs()));
        let late = t.row(29).iter().fold(0.0 as Real, |a, v| a.max(v.abs()));
        assert!(late > 10.0 * early);
    }

    #[test]
    fn tanh_jacobian_matches_finite_differences() {
        let m = TanhDynamics::random(4, 5.0, 21);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let s: Vec<Real> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic = crate::dynamics::jacobian_matrix(&m, 1, &s);
            let numeric = fd::central_jacobian(&m, 1, &s);
            let denom = analytic.abs().max().max(1.0);
            assert!((&analytic - &numeric).abs().max() / denom < 1e-5);
            let diag = crate::dynamics::jacobian_diag_vector(&m, 1, &s);
            for i in 0..4 {
                assert!((analytic[(i, i)] - diag[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tanh_outputs_bounded() {
        let m = TanhDynamics::random(4, 5.0, 4);
        let t = crate::eval::sequential_evaluate(&m, 200).unwrap();
        assert!(t.max_abs() <= 1.0);
    }
}
