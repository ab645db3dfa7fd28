//! The linear Gaussian state-space model of one damped Newton step.
//!
//! Minimizing the Levenberg-Marquardt Lagrangian
//! `0.5 ||r + J ds||^2 + (lambda/2) ||ds||^2` at the current iterate is, up
//! to an additive constant, maximizing the log joint of an LGSSM whose
//! dynamics means come from the linearization of `f` and whose "emissions"
//! are the states of the previous iterate with precision `lambda`:
//!
//! ```text
//! s_1 ~ N(f_1(s_0), I)
//! s_t | s_{t-1} ~ N(F_t s_{t-1} + c_t, I),   F_t = df_t/ds at s^{(i)}_{t-1},
//!                                            c_t = f_t(s^{(i)}_{t-1}) - F_t s^{(i)}_{t-1}
//! y_t = s^{(i)}_t ~ N(s_t, (1/lambda) I)
//! ```
//!
//! The damping weight `lambda` is the emission precision: large values pin
//! the posterior to the previous iterate (small trust region), `lambda -> 0`
//! recovers the undamped Newton step.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DynamicsModel;
use crate::trace::StateTrace;
use crate::{Error, Mode, Real, Result};

/// Per-timestep dynamics blocks: dense Jacobians or their diagonals.
#[derive(Debug, Clone)]
pub enum DynBlocks {
    Dense(Vec<DMatrix<Real>>),
    Diag(Vec<DVector<Real>>),
}

/// A linear Gaussian state-space model with identity process noise,
/// identity initial covariance, and emission covariance `(1/lambda) I`.
#[derive(Debug, Clone)]
pub struct Lgssm {
    dim: usize,
    len: usize,
    lambda: Real,
    /// `m_1 = f_1(s_0)`.
    init_mean: DVector<Real>,
    /// `F_t` for `t = 2..=T` (index `t - 2`).
    dynamics: DynBlocks,
    /// `c_t` for `t = 2..=T` (index `t - 2`).
    offsets: Vec<DVector<Real>>,
    /// `y_t` for `t = 1..=T`.
    emissions: Vec<DVector<Real>>,
}

impl Lgssm {
    /// Assemble an LGSSM directly from its parts (tests and examples build
    /// synthetic instances this way).
    pub fn from_parts(
        init_mean: DVector<Real>,
        dynamics: DynBlocks,
        offsets: Vec<DVector<Real>>,
        emissions: Vec<DVector<Real>>,
        lambda: Real,
    ) -> Result<Self> {
        let dim = init_mean.len();
        let len = emissions.len();
        if len == 0 {
            return Err(Error::Empty("Lgssm: no emissions"));
        }
        let n_dyn = match &dynamics {
            DynBlocks::Dense(v) => {
                if v.iter().any(|m| m.shape() != (dim, dim)) {
                    return Err(Error::shape("Lgssm dynamics", format!("{dim}x{dim}"), "other"));
                }
                v.len()
            }
            DynBlocks::Diag(v) => {
                if v.iter().any(|m| m.len() != dim) {
                    return Err(Error::shape("Lgssm dynamics", dim, "other"));
                }
                v.len()
            }
        };
        if n_dyn + 1 != len || offsets.len() != n_dyn {
            return Err(Error::shape("Lgssm blocks", len - 1, n_dyn));
        }
        if emissions.iter().any(|y| y.len() != dim) || offsets.iter().any(|c| c.len() != dim) {
            return Err(Error::shape("Lgssm vectors", dim, "other"));
        }
        check_lambda(lambda)?;
        Ok(Lgssm {
            dim,
            len,
            lambda,
            init_mean,
            dynamics,
            offsets,
            emissions,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lambda(&self) -> Real {
        self.lambda
    }

    pub fn mode(&self) -> Mode {
        match self.dynamics {
            DynBlocks::Dense(_) => Mode::Dense,
            DynBlocks::Diag(_) => Mode::Diagonal,
        }
    }

    pub fn init_mean(&self) -> &DVector<Real> {
        &self.init_mean
    }

    pub fn dynamics(&self) -> &DynBlocks {
        &self.dynamics
    }

    /// `c_t` for `t = k + 2` (0-based block `k`).
    pub fn offset(&self, k: usize) -> &DVector<Real> {
        &self.offsets[k]
    }

    pub fn emission(&self, k: usize) -> &DVector<Real> {
        &self.emissions[k]
    }

    /// `F_{k+2} x` regardless of storage mode.
    pub fn apply_dynamics(&self, k: usize, x: &DVector<Real>) -> DVector<Real> {
        match &self.dynamics {
            DynBlocks::Dense(f) => &f[k] * x,
            DynBlocks::Diag(f) => f[k].component_mul(x),
        }
    }

    /// Log joint probability of a full candidate trace under this model,
    /// normalization constants included.
    pub fn log_joint(&self, states: &StateTrace) -> Result<Real> {
        if states.len() != self.len || states.dim() != self.dim {
            return Err(Error::shape(
                "Lgssm::log_joint",
                format!("{}x{}", self.len, self.dim),
                format!("{}x{}", states.len(), states.dim()),
            ));
        }
        let d = self.dim as Real;
        let ln_2pi = (2.0 * std::f64::consts::PI) as Real;
        let ln_2pi = ln_2pi.ln();
        let row = |k: usize| DVector::from_row_slice(states.row(k));

        // ln N(x | mu, v I) = -D/2 ln(2 pi v) - ||x - mu||^2 / (2 v)
        let gauss = |diff: &DVector<Real>, var: Real| -> Real {
            -0.5 * d * (ln_2pi + var.ln()) - diff.norm_squared() / (2.0 * var)
        };

        let mut lp = gauss(&(row(0) - &self.init_mean), 1.0);
        for k in 0..self.len {
            lp += gauss(&(&self.emissions[k] - row(k)), 1.0 / self.lambda);
        }
        for k in 0..self.len - 1 {
            let mean = self.apply_dynamics(k, &row(k)) + &self.offsets[k];
            lp += gauss(&(row(k + 1) - mean), 1.0);
        }
        Ok(lp)
    }
}

fn check_lambda(lambda: Real) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

/// Linearize the model around `trace` into the LGSSM whose posterior mode is
/// the damped Newton step.
pub fn build_lgssm<M: DynamicsModel + ?Sized>(
    trace: &StateTrace,
    model: &M,
    lambda: Real,
    mode: Mode,
) -> Result<Lgssm> {
    check_lambda(lambda)?;
    if trace.dim() != model.state_dim() {
        return Err(Error::shape("build_lgssm", model.state_dim(), trace.dim()));
    }
    if let Some(row) = trace.first_nonfinite_row() {
        return Err(Error::NonFinite {
            context: "build_lgssm",
            row,
        });
    }
    let d = trace.dim();
    let len = trace.len();

    let mut init_mean = DVector::zeros(d);
    model.step(1, model.initial_state(), init_mean.as_mut_slice());

    let mut offsets = Vec::with_capacity(len - 1);
    let mut emissions = Vec::with_capacity(len);
    for k in 0..len {
        emissions.push(DVector::from_row_slice(trace.row(k)));
    }

    let dynamics = match mode {
        Mode::Dense => {
            let mut blocks = Vec::with_capacity(len - 1);
            let mut buf = vec![0.0; d * d];
            for k in 0..len - 1 {
                let lin_point = trace.row(k);
                model.jacobian(k + 2, lin_point, &mut buf);
                let f = DMatrix::from_fn(d, d, |i, j| buf[i * d + j]);
                let mut c = DVector::zeros(d);
                model.step(k + 2, lin_point, c.as_mut_slice());
                c -= &f * DVector::from_row_slice(lin_point);
                offsets.push(c);
                blocks.push(f);
            }
            DynBlocks::Dense(blocks)
        }
        Mode::Diagonal => {
            let mut blocks = Vec::with_capacity(len - 1);
            let mut buf = vec![0.0; d];
            for k in 0..len - 1 {
                let lin_point = trace.row(k);
                model.jacobian_diag(k + 2, lin_point, &mut buf);
                let f = DVector::from_row_slice(&buf);
                let mut c = DVector::zeros(d);
                model.step(k + 2, lin_point, c.as_mut_slice());
                c -= f.component_mul(&DVector::from_row_slice(lin_point));
                offsets.push(c);
                blocks.push(f);
            }
            DynBlocks::Diag(blocks)
        }
    };

    Lgssm::from_parts(init_mean, dynamics, offsets, emissions, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Affine;

    fn scalar_decay() -> Affine {
        Affine::new(
            DMatrix::from_element(1, 1, 0.5),
            DVector::zeros(1),
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn hand_example_blocks() {
        // f(s) = 0.5 s, s_0 = 1, trace [1, 1], lambda 1:
        // m_1 = 0.5, F_2 = 0.5, c_2 = 0.5 - 0.5 = 0, emission variance 1.
        let m = scalar_decay();
        let trace = StateTrace::from_flat(2, 1, vec![1.0, 1.0]).unwrap();
        let g = build_lgssm(&trace, &m, 1.0, Mode::Dense).unwrap();
        assert_eq!(g.init_mean()[0], 0.5);
        match g.dynamics() {
            DynBlocks::Dense(f) => assert_eq!(f[0][(0, 0)], 0.5),
            _ => panic!(),
        }
        assert_eq!(g.offset(0)[0], 0.0);
        assert_eq!(g.emission(1)[0], 1.0);
        assert_eq!(g.lambda(), 1.0);
    }

    #[test]
    fn rejects_bad_lambda_and_nonfinite_trace() {
        let m = scalar_decay();
        let trace = StateTrace::zeros(3, 1);
        assert!(build_lgssm(&trace, &m, 0.0, Mode::Dense).is_err());
        assert!(build_lgssm(&trace, &m, -1.0, Mode::Dense).is_err());
        assert!(build_lgssm(&trace, &m, Real::NAN, Mode::Dense).is_err());
        let mut bad = trace.clone();
        bad.row_mut(0)[0] = Real::INFINITY;
        assert!(build_lgssm(&bad, &m, 1.0, Mode::Dense).is_err());
    }

    /// The negative log joint equals the Lagrangian up to an additive
    /// constant: checked at random displacements by evaluating both sides.
    #[test]
    fn log_joint_matches_lagrangian_up_to_constant() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let model = crate::models::Gru::random(2, 2, 3, 5);
        let trace = StateTrace::from_fn(3, 2, |k, j| ((k + 2 * j) as Real * 0.9).sin());
        let lambda = 0.7;
        let g = build_lgssm(&trace, &model, lambda, Mode::Dense).unwrap();

        // Full residual and Jacobian at the linearization point, assembled
        // independently of the LGSSM.
        let r = crate::eval::residual(&trace, &model).unwrap();
        let mut diffs = Vec::new();
        for _ in 0..10 {
            let ds = StateTrace::from_fn(3, 2, |_, _| rng.random_range(-0.5..0.5));
            // Lagrangian: 0.5 ||r + J ds||^2 + lambda/2 ||ds||^2 where
            // (J ds)_t = ds_t - F_t ds_{t-1}.
            let mut quad = 0.0;
            for k in 0..3 {
                let mut row = DVector::from_row_slice(ds.row(k));
                if k > 0 {
                    row -= g.apply_dynamics(k - 1, &DVector::from_row_slice(ds.row(k - 1)));
                }
                for j in 0..2 {
                    let v = r.row(k)[j] + row[j];
                    quad += v * v;
                }
            }
            let penalty: Real = ds.as_slice().iter().map(|v| v * v).sum();
            let lagrangian = 0.5 * quad + 0.5 * lambda * penalty;

            let cand = StateTrace::from_fn(3, 2, |k, j| trace.row(k)[j] + ds.row(k)[j]);
            let neg_log_joint = -g.log_joint(&cand).unwrap();
            diffs.push(neg_log_joint - lagrangian);
        }
        let mean: Real = diffs.iter().sum::<Real>() / diffs.len() as Real;
        let var: Real =
            diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / diffs.len() as Real;
        assert!(var < 1e-10, "difference is not constant: var = {var}");
    }
}
