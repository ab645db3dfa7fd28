//! Gated recurrent unit cell with analytic Jacobians, plus the bundled
//! exogenous-input GRU model.
//!
//! The cell is the standard fully-gated variant:
//!
//! ```text
//! z = sigmoid(W_z x + U_z h + b_z)        update gate
//! r = sigmoid(W_r x + U_r h + b_r)        reset gate
//! h~ = tanh(W_h x + U_h (r .* h) + b_h)   candidate
//! h' = (1 - z) .* h + z .* h~
//! ```
//!
//! `jacobian_h_diag` computes the exact diagonal of `dh'/dh` without ever
//! materializing the `D x D` matrix, which is what keeps the quasi-Newton
//! solvers at `O(TD)` element memory.

use std::cell::RefCell;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::math::{at, gemv_acc, sigmoid};
use crate::dynamics::DynamicsModel;
use crate::{Error, Real, Result};

/// Weights of one GRU cell. Read-only after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub w_z: DMatrix<Real>,
    pub w_r: DMatrix<Real>,
    pub w_h: DMatrix<Real>,
    pub u_z: DMatrix<Real>,
    pub u_r: DMatrix<Real>,
    pub u_h: DMatrix<Real>,
    pub b_z: Vec<Real>,
    pub b_r: Vec<Real>,
    pub b_h: Vec<Real>,
}

#[derive(Default)]
struct Scratch {
    z: Vec<Real>,
    r: Vec<Real>,
    ht: Vec<Real>,
    rh: Vec<Real>,
    p: Vec<Real>,
    q: Vec<Real>,
    w: Vec<Real>,
}

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

// Jacobian factors, derived from the gate algebra:
//   p_i = (h~_i - h_i) z_i (1 - z_i)       (through the update gate)
//   q_i = z_i (1 - h~_i^2)                 (through the candidate)
//   w_k = h_k r_k (1 - r_k)                (through the reset gate)
fn jac_factors(s: &mut Scratch, h: &[Real]) {
    let Scratch { z, r, ht, p, q, w, .. } = s;
    p.clear();
    q.clear();
    w.clear();
    for i in 0..h.len() {
        p.push((ht[i] - h[i]) * z[i] * (1.0 - z[i]));
        q.push(z[i] * (1.0 - ht[i] * ht[i]));
        w.push(h[i] * r[i] * (1.0 - r[i]));
    }
}

impl GruCell {
    /// Random cell: weights uniform in `(-1/sqrt(D), 1/sqrt(D))`, zero biases.
    pub fn random(hidden: usize, input: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (hidden as Real).sqrt();
        let m = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
        };
        GruCell {
            w_z: m(hidden, input, rng),
            w_r: m(hidden, input, rng),
            w_h: m(hidden, input, rng),
            u_z: m(hidden, hidden, rng),
            u_r: m(hidden, hidden, rng),
            u_h: m(hidden, hidden, rng),
            b_z: vec![0.0; hidden],
            b_r: vec![0.0; hidden],
            b_h: vec![0.0; hidden],
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_z.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden_dim();
        let i = self.input_dim();
        let shapes_ok = self.w_r.shape() == (d, i)
            && self.w_h.shape() == (d, i)
            && self.u_r.shape() == (d, d)
            && self.u_h.shape() == (d, d)
            && self.b_z.len() == d
            && self.b_r.len() == d
            && self.b_h.len() == d;
        if !shapes_ok {
            return Err(Error::InvalidParameter("inconsistent GRU weight shapes".into()));
        }
        let finite = self
            .b_z
            .iter()
            .chain(&self.b_r)
            .chain(&self.b_h)
            .all(|v| v.is_finite())
            && [&self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h]
                .iter()
                .all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidParameter("non-finite GRU weights".into()));
        }
        Ok(())
    }

    /// Gate pre-activations -> activations into scratch. Leaves `z`, `r`,
    /// `ht` (candidate) populated for `x`, `h`.
    fn gates(&self, x: &[Real], h: &[Real], s: &mut Scratch) {
        let d = self.hidden_dim();
        s.z.clear();
        s.z.extend_from_slice(&self.b_z);
        gemv_acc(&mut s.z, &self.w_z, x);
        gemv_acc(&mut s.z, &self.u_z, h);
        for v in s.z.iter_mut() {
            *v = sigmoid(*v);
        }

        s.r.clear();
        s.r.extend_from_slice(&self.b_r);
        gemv_acc(&mut s.r, &self.w_r, x);
        gemv_acc(&mut s.r, &self.u_r, h);
        for v in s.r.iter_mut() {
            *v = sigmoid(*v);
        }

        s.rh.clear();
        s.rh.extend((0..d).map(|k| s.r[k] * h[k]));
        s.ht.clear();
        s.ht.extend_from_slice(&self.b_h);
        gemv_acc(&mut s.ht, &self.w_h, x);
        gemv_acc(&mut s.ht, &self.u_h, &s.rh);
        for v in s.ht.iter_mut() {
            *v = v.tanh();
        }
    }

    /// `h' = (1 - z) .* h + z .* h~` into `out`.
    pub fn forward(&self, x: &[Real], h: &[Real], out: &mut [Real]) {
        SCRATCH.with(|cell| {
            let s = &mut *cell.borrow_mut();
            self.gates(x, h, s);
            for i in 0..self.hidden_dim() {
                out[i] = (1.0 - s.z[i]) * h[i] + s.z[i] * s.ht[i];
            }
        });
    }

    /// Dense `dh'/dh`, row-major into `out` (length `D * D`).
    pub fn jacobian_h(&self, x: &[Real], h: &[Real], out: &mut [Real]) {
        let d = self.hidden_dim();
        SCRATCH.with(|cell| {
            let s = &mut *cell.borrow_mut();
            self.gates(x, h, s);
            jac_factors(s, h);
            let Scratch { z, r, p, q, w, .. } = &*s;
            for i in 0..d {
                for j in 0..d {
                    // M[i,j] = sum_k U_h[i,k] w_k U_r[k,j]
                    let mut m = 0.0;
                    for k in 0..d {
                        m += at(&self.u_h, i, k) * w[k] * at(&self.u_r, k, j);
                    }
                    let mut v = p[i] * at(&self.u_z, i, j) + q[i] * (at(&self.u_h, i, j) * r[j] + m);
                    if i == j {
                        v += 1.0 - z[i];
                    }
                    out[i * d + j] = v;
                }
            }
        });
    }

    /// Diagonal of `dh'/dh` into `out` (length `D`); no `D x D` storage.
    pub fn jacobian_h_diag(&self, x: &[Real], h: &[Real], out: &mut [Real]) {
        let d = self.hidden_dim();
        SCRATCH.with(|cell| {
            let s = &mut *cell.borrow_mut();
            self.gates(x, h, s);
            jac_factors(s, h);
            let Scratch { z, r, p, q, w, .. } = &*s;
            for i in 0..d {
                let mut m = 0.0;
                for k in 0..d {
                    m += at(&self.u_h, i, k) * w[k] * at(&self.u_r, k, i);
                }
                out[i] = (1.0 - z[i])
                    + p[i] * at(&self.u_z, i, i)
                    + q[i] * (at(&self.u_h, i, i) * r[i] + m);
            }
        });
    }

    /// Dense `dh'/dx`, row-major into `out` (length `D * I`).
    pub fn jacobian_x(&self, x: &[Real], h: &[Real], out: &mut [Real]) {
        let d = self.hidden_dim();
        let ni = self.input_dim();
        SCRATCH.with(|cell| {
            let s = &mut *cell.borrow_mut();
            self.gates(x, h, s);
            jac_factors(s, h);
            let Scratch { p, q, w, .. } = &*s;
            for i in 0..d {
                for m in 0..ni {
                    let mut inner = 0.0;
                    for k in 0..d {
                        inner += at(&self.u_h, i, k) * w[k] * at(&self.w_r, k, m);
                    }
                    out[i * ni + m] =
                        p[i] * at(&self.w_z, i, m) + q[i] * (at(&self.w_h, i, m) + inner);
                }
            }
        });
    }
}

/// A GRU driven by a fixed exogenous input sequence, absorbed into `f_t`.
///
/// The state is the hidden vector; `f_t(h) = cell(x_t, h)` where `x_t` is
/// row `t-1` of the stored inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gru {
    cell: GruCell,
    /// Row-major `T x I` inputs.
    inputs: Vec<Real>,
    input_dim: usize,
    len: usize,
    initial: Vec<Real>,
}

impl Gru {
    pub fn new(cell: GruCell, inputs: Vec<Real>, input_dim: usize, initial: Vec<Real>) -> Result<Self> {
        cell.validate()?;
        if input_dim != cell.input_dim() || initial.len() != cell.hidden_dim() {
            return Err(Error::InvalidParameter(
                "GRU model dims inconsistent with cell".into(),
            ));
        }
        if inputs.len() % input_dim != 0 || inputs.is_empty() {
            return Err(Error::InvalidParameter("bad input sequence length".into()));
        }
        let len = inputs.len() / input_dim;
        Ok(Gru {
            cell,
            inputs,
            input_dim,
            len,
            initial,
        })
    }

    /// Untrained GRU: random weights, standard-normal inputs, zero `h_0`.
    /// Deterministic per seed.
    pub fn random(hidden: usize, input: usize, len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = GruCell::random(hidden, input, &mut rng);
        let inputs: Vec<Real> = (0..len * input)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as Real)
            .collect();
        Gru {
            cell,
            inputs,
            input_dim: input,
            len,
            initial: vec![0.0; hidden],
        }
    }

    pub fn cell(&self) -> &GruCell {
        &self.cell
    }

    /// Maximum sequence length supported by the stored inputs.
    pub fn max_len(&self) -> usize {
        self.len
    }

    fn input(&self, t: usize) -> &[Real] {
        assert!(
            (1..=self.len).contains(&t),
            "time index {t} outside 1..={}",
            self.len
        );
        &self.inputs[(t - 1) * self.input_dim..t * self.input_dim]
    }
}

impl DynamicsModel for Gru {
    fn state_dim(&self) -> usize {
        self.cell.hidden_dim()
    }

    fn initial_state(&self) -> &[Real] {
        &self.initial
    }

    fn step(&self, t: usize, state: &[Real], out: &mut [Real]) {
        self.cell.forward(self.input(t), state, out);
    }

    fn jacobian(&self, t: usize, state: &[Real], out: &mut [Real]) {
        self.cell.jacobian_h(self.input(t), state, out);
    }

    fn jacobian_diag(&self, t: usize, state: &[Real], out: &mut [Real]) {
        self.cell.jacobian_h_diag(self.input(t), state, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::fd;

    #[test]
    fn zero_cell_fixes_origin() {
        // All-zero weights/biases/input: z = 0.5, h~ = 0, so h' = 0 at h = 0.
        let cell = GruCell {
            w_z: DMatrix::zeros(3, 2),
            w_r: DMatrix::zeros(3, 2),
            w_h: DMatrix::zeros(3, 2),
            u_z: DMatrix::zeros(3, 3),
            u_r: DMatrix::zeros(3, 3),
            u_h: DMatrix::zeros(3, 3),
            b_z: vec![0.0; 3],
            b_r: vec![0.0; 3],
            b_h: vec![0.0; 3],
        };
        let mut out = vec![1.0; 3];
        cell.forward(&[0.0, 0.0], &[0.0; 3], &mut out);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn scalar_cell_hand_computation() {
        let cell = GruCell {
            w_z: DMatrix::from_element(1, 1, 0.3),
            w_r: DMatrix::from_element(1, 1, 0.5),
            w_h: DMatrix::from_element(1, 1, 0.7),
            u_z: DMatrix::from_element(1, 1, -0.2),
            u_r: DMatrix::from_element(1, 1, 0.4),
            u_h: DMatrix::from_element(1, 1, 0.6),
            b_z: vec![0.1],
            b_r: vec![-0.3],
            b_h: vec![0.2],
        };
        let (x, h) = (0.8, -0.5);
        let z = sigmoid(0.3 * x + (-0.2) * h + 0.1);
        let r = sigmoid(0.5 * x + 0.4 * h - 0.3);
        let ht = (0.7 * x + 0.6 * (r * h) + 0.2).tanh();
        let expected = (1.0 - z) * h + z * ht;
        let mut out = [0.0];
        cell.forward(&[x], &[h], &mut out);
        assert!((out[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn output_is_convex_combination() {
        // |h'|_inf <= max(|h|_inf, 1) always.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cell = GruCell::random(6, 4, &mut rng);
        for _ in 0..200 {
            let h: Vec<Real> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x: Vec<Real> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut out = vec![0.0; 6];
            cell.forward(&x, &h, &mut out);
            let bound = h.iter().fold(1.0 as Real, |m, v| m.max(v.abs()));
            assert!(out.iter().all(|v| v.abs() <= bound + 1e-12));
        }
    }

    #[test]
    fn passthrough_gate_gives_identity_jacobian() {
        // Bias -50 drives z to 0, so h' = h and dh'/dh = I.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cell = GruCell::random(4, 2, &mut rng);
        cell.b_z = vec![-50.0; 4];
        let h: Vec<Real> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut jac = vec![0.0; 16];
        cell.jacobian_h(&[0.3, -0.7], &h, &mut jac);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((jac[i * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let gru = Gru::random(4, 4, 8, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for t in 1..=8 {
            let h: Vec<Real> = (0..4).map(|_| rng.random_range(-0.9..0.9)).collect();
            let analytic = crate::dynamics::jacobian_matrix(&gru, t, &h);
            let numeric = fd::central_jacobian(&gru, t, &h);
            let denom = analytic.abs().max().max(1.0);
            assert!(
                (&analytic - &numeric).abs().max() / denom < 1e-6,
                "jacobian mismatch at t={t}"
            );
        }
    }

    #[test]
    fn diag_matches_dense_diagonal() {
        let gru = Gru::random(5, 3, 4, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for t in 1..=4 {
            let h: Vec<Real> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dense = crate::dynamics::jacobian_matrix(&gru, t, &h);
            let diag = crate::dynamics::jacobian_diag_vector(&gru, t, &h);
            for i in 0..5 {
                assert!((dense[(i, i)] - diag[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_x_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cell = GruCell::random(4, 3, &mut rng);
        let h: Vec<Real> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<Real> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut analytic = vec![0.0; 12];
        cell.jacobian_x(&x, &h, &mut analytic);
        let eps = 1e-6;
        for m in 0..3 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[m] += eps;
            xm[m] -= eps;
            let (mut fp, mut fm) = (vec![0.0; 4], vec![0.0; 4]);
            cell.forward(&xp, &h, &mut fp);
            cell.forward(&xm, &h, &mut fm);
            for i in 0..4 {
                let numeric = (fp[i] - fm[i]) / (2.0 * eps);
                assert!((analytic[i * 3 + m] - numeric).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = Gru::random(8, 8, 16, 99);
        let b = Gru::random(8, 8, 16, 99);
        assert_eq!(a.cell, b.cell);
        assert_eq!(a.inputs, b.inputs);
        let c = Gru::random(8, 8, 16, 100);
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn sequential_trace_stays_in_unit_box() {
        let gru = Gru::random(8, 8, 64, 5);
        let trace = crate::eval::sequential_evaluate(&gru, 64).unwrap();
        assert!(trace.as_slice().iter().all(|v| v.abs() <= 1.0));
    }
}
