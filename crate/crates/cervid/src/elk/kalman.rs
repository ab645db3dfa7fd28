//! Kalman filtering for the step LGSSM: a classical sequential recursion
//! (the oracle), a parallel associative-scan formulation, and the RTS
//! smoother whose output is the exact posterior mode.
//!
//! The scan element is the five-tuple `(A, b, C, eta, J)` parameterizing a
//! conditional-Gaussian message; combining two messages eliminates the
//! shared intermediate state. Because the step LGSSM has identity process
//! noise, identity emission matrix, and emission covariance `(1/lambda) I`,
//! element construction needs no matrix solves: with
//! `kappa = lambda / (1 + lambda)` the generic element is
//!
//! ```text
//! A = (1 - kappa) F      b = c + kappa (y - c)      C = (1 - kappa) I
//! eta = kappa F^T (y - c)                           J = kappa F^T F
//! ```
//!
//! and the first element holds the prior updated with `y_1` (`A = 0`). The
//! prefix at `t` yields the filtered mean `b_t` and covariance `C_t`.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};

use super::lgssm::{DynBlocks, Lgssm};
use crate::exec::Exec;
use crate::scan::scan_in_place;
use crate::trace::StateTrace;
use crate::{Error, Mode, Real, Result};

/// Filtered posterior statistics.
#[derive(Debug, Clone)]
pub struct FilterResult {
    /// `T x D` filtered means, `p(s_t | y_{1:t})`.
    pub means: StateTrace,
    pub covariances: Covariances,
    /// Marginal log likelihood (sequential filter only).
    pub log_likelihood: Option<Real>,
    /// Ridge regularizations applied inside scan combines (parallel only).
    pub ridge_activations: usize,
}

#[derive(Debug, Clone)]
pub enum Covariances {
    Dense(Vec<DMatrix<Real>>),
    Diag(Vec<DVector<Real>>),
}

impl Covariances {
    pub fn len(&self) -> usize {
        match self {
            Covariances::Dense(v) => v.len(),
            Covariances::Diag(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Covariance at `t` as a dense matrix (diagonal mode is expanded).
    pub fn dense_at(&self, k: usize) -> DMatrix<Real> {
        match self {
            Covariances::Dense(v) => v[k].clone(),
            Covariances::Diag(v) => DMatrix::from_diagonal(&v[k]),
        }
    }
}

fn kappa(lambda: Real) -> Real {
    // lambda / (1 + lambda), stable for both tiny and huge lambda.
    1.0 / (1.0 + 1.0 / lambda)
}

struct SequentialPass {
    filtered_means: Vec<DVector<Real>>,
    filtered_covs_dense: Vec<DMatrix<Real>>,
    filtered_covs_diag: Vec<DVector<Real>>,
    predicted_means: Vec<DVector<Real>>,
    predicted_covs_dense: Vec<DMatrix<Real>>,
    predicted_covs_diag: Vec<DVector<Real>>,
    log_likelihood: Real,
}

/// Classical predict/update recursion, keeping the predicted moments for the
/// smoother backward pass.
fn sequential_pass(m: &Lgssm) -> Result<SequentialPass> {
    let d = m.dim();
    let len = m.len();
    let r_var = 1.0 / m.lambda();
    let ln_2pi = ((2.0 * std::f64::consts::PI) as Real).ln();

    let mut out = SequentialPass {
        filtered_means: Vec::with_capacity(len),
        filtered_covs_dense: Vec::new(),
        filtered_covs_diag: Vec::new(),
        predicted_means: Vec::with_capacity(len),
        predicted_covs_dense: Vec::new(),
        predicted_covs_diag: Vec::new(),
        log_likelihood: 0.0,
    };

    match m.dynamics() {
        DynBlocks::Dense(fs) => {
            let eye = DMatrix::<Real>::identity(d, d);
            let mut mean = m.init_mean().clone();
            let mut cov = eye.clone();
            for k in 0..len {
                if k > 0 {
                    let f = &fs[k - 1];
                    mean = f * &mean + m.offset(k - 1);
                    cov = f * &cov * f.transpose() + &eye;
                }
                out.predicted_means.push(mean.clone());
                out.predicted_covs_dense.push(cov.clone());

                let mut s = cov.clone();
                for i in 0..d {
                    s[(i, i)] += r_var;
                }
                let chol = s.clone().cholesky().ok_or_else(|| Error::Numerical {
                    row: k,
                    message: "innovation covariance lost positive-definiteness".into(),
                })?;
                let innov = m.emission(k) - &mean;
                // K = P S^{-1} = (S^{-1} P)^T since both are symmetric.
                let gain = chol.solve(&cov).transpose();
                mean += &gain * &innov;
                cov = (&eye - &gain) * &cov;
                // Symmetrize to stop round-off drift.
                cov = (&cov + cov.transpose()) * 0.5;

                let ln_det: Real = chol.l().diagonal().iter().map(|v| v.ln()).sum::<Real>() * 2.0;
                let maha = innov.dot(&chol.solve(&innov));
                out.log_likelihood += -0.5 * (d as Real) * ln_2pi - 0.5 * ln_det - 0.5 * maha;

                out.filtered_means.push(mean.clone());
                out.filtered_covs_dense.push(cov.clone());
            }
        }
        DynBlocks::Diag(fs) => {
            let mut mean = m.init_mean().clone();
            let mut cov = DVector::<Real>::from_element(d, 1.0);
            for k in 0..len {
                if k > 0 {
                    let f = &fs[k - 1];
                    mean = f.component_mul(&mean) + m.offset(k - 1);
                    cov = f.component_mul(f).component_mul(&cov).add_scalar(1.0);
                }
                out.predicted_means.push(mean.clone());
                out.predicted_covs_diag.push(cov.clone());

                for i in 0..d {
                    let s = cov[i] + r_var;
                    if !(s > 0.0) {
                        return Err(Error::Numerical {
                            row: k,
                            message: "non-positive innovation variance".into(),
                        });
                    }
                    let innov = m.emission(k)[i] - mean[i];
                    let gain = cov[i] / s;
                    mean[i] += gain * innov;
                    cov[i] *= 1.0 - gain;
                    out.log_likelihood +=
                        -0.5 * ln_2pi - 0.5 * s.ln() - 0.5 * innov * innov / s;
                }
                out.filtered_means.push(mean.clone());
                out.filtered_covs_diag.push(cov.clone());
            }
        }
    }
    Ok(out)
}

fn means_to_trace(means: &[DVector<Real>], d: usize) -> StateTrace {
    StateTrace::from_fn(means.len(), d, |k, j| means[k][j])
}

/// Sequential Kalman filter: the oracle implementation.
pub fn kalman_filter_sequential(m: &Lgssm) -> Result<FilterResult> {
    let pass = sequential_pass(m)?;
    let covariances = match m.mode() {
        Mode::Dense => Covariances::Dense(pass.filtered_covs_dense),
        Mode::Diagonal => Covariances::Diag(pass.filtered_covs_diag),
    };
    Ok(FilterResult {
        means: means_to_trace(&pass.filtered_means, m.dim()),
        covariances,
        log_likelihood: Some(pass.log_likelihood),
        ridge_activations: 0,
    })
}

/// Rauch-Tung-Striebel smoother: the exact posterior mode of the LGSSM,
/// i.e. the exact minimizer of the damped linearized objective.
pub fn kalman_smoother(m: &Lgssm) -> Result<StateTrace> {
    let d = m.dim();
    let len = m.len();
    let pass = sequential_pass(m)?;
    let mut smoothed: Vec<DVector<Real>> = vec![DVector::zeros(d); len];
    smoothed[len - 1] = pass.filtered_means[len - 1].clone();

    match m.dynamics() {
        DynBlocks::Dense(fs) => {
            for k in (0..len - 1).rev() {
                let f_next = &fs[k];
                let p_pred_next = &pass.predicted_covs_dense[k + 1];
                let chol = p_pred_next.clone().cholesky().ok_or_else(|| Error::Numerical {
                    row: k + 1,
                    message: "predicted covariance lost positive-definiteness".into(),
                })?;
                // G = P_f F^T P_pred^{-1}; both P's symmetric.
                let gain = chol.solve(&(f_next * &pass.filtered_covs_dense[k])).transpose();
                let lift = &smoothed[k + 1] - &pass.predicted_means[k + 1];
                smoothed[k] = &pass.filtered_means[k] + gain * lift;
            }
        }
        DynBlocks::Diag(fs) => {
            for k in (0..len - 1).rev() {
                let f_next = &fs[k];
                let mut s = pass.filtered_means[k].clone();
                for i in 0..d {
                    let gain =
                        pass.filtered_covs_diag[k][i] * f_next[i] / pass.predicted_covs_diag[k + 1][i];
                    s[i] += gain * (smoothed[k + 1][i] - pass.predicted_means[k + 1][i]);
                }
                smoothed[k] = s;
            }
        }
    }
    Ok(means_to_trace(&smoothed, d))
}

/// The five-tuple conditional-Gaussian message of the parallel Kalman scan.
#[derive(Debug, Clone)]
pub struct KalmanScanElement {
    pub a: DMatrix<Real>,
    pub b: DVector<Real>,
    pub c: DMatrix<Real>,
    pub eta: DVector<Real>,
    pub j: DMatrix<Real>,
}

/// Ridge added to `(I + C_i J_j)` when its factorization fails. The identity
/// process noise keeps eigenvalues at one or above, so this is a guardrail;
/// activations are counted and surfaced in the filter result.
const COMBINE_RIDGE: Real = 1e-12;

impl KalmanScanElement {
    /// Associative combination; `e1` is the earlier message.
    pub fn combine(e1: &Self, e2: &Self) -> Result<Self> {
        Self::combine_counted(e1, e2, None)
    }

    fn combine_counted(e1: &Self, e2: &Self, ridge_hits: Option<&AtomicUsize>) -> Result<Self> {
        let d = e1.b.len();
        if e2.b.len() != d {
            return Err(Error::shape("KalmanScanElement::combine", d, e2.b.len()));
        }
        let eye = DMatrix::<Real>::identity(d, d);

        let solve_pair = |m: DMatrix<Real>| -> Result<nalgebra::LU<Real, nalgebra::Dyn, nalgebra::Dyn>> {
            let lu = m.clone().lu();
            if lu.is_invertible() {
                return Ok(lu);
            }
            if let Some(counter) = ridge_hits {
                counter.fetch_add(1, Ordering::Relaxed);
            }
            let mut ridged = m;
            for i in 0..d {
                ridged[(i, i)] += COMBINE_RIDGE;
            }
            let lu = ridged.lu();
            if lu.is_invertible() {
                Ok(lu)
            } else {
                Err(Error::Numerical {
                    row: 0,
                    message: "singular (I + C J) in Kalman combine".into(),
                })
            }
        };

        let lu_cj = solve_pair(&eye + &e1.c * &e2.j)?;
        let lu_jc = solve_pair(&eye + &e2.j * &e1.c)?;

        let a = &e2.a * lu_cj.solve(&e1.a).unwrap();
        let b = &e2.a * lu_cj.solve(&(&e1.b + &e1.c * &e2.eta)).unwrap() + &e2.b;
        let mut c = &e2.a * lu_cj.solve(&e1.c).unwrap() * e2.a.transpose() + &e2.c;
        c = (&c + c.transpose()) * 0.5;
        let eta = e1.a.transpose() * lu_jc.solve(&(&e2.eta - &e2.j * &e1.b)).unwrap() + &e1.eta;
        let mut j = e1.a.transpose() * lu_jc.solve(&e2.j).unwrap() * &e1.a + &e1.j;
        j = (&j + j.transpose()) * 0.5;
        Ok(KalmanScanElement { a, b, c, eta, j })
    }
}

/// Diagonal-mode message: every part is a `D`-vector and stays one.
#[derive(Debug, Clone)]
pub struct DiagKalmanElement {
    pub a: DVector<Real>,
    pub b: DVector<Real>,
    pub c: DVector<Real>,
    pub eta: DVector<Real>,
    pub j: DVector<Real>,
}

impl DiagKalmanElement {
    /// Scalar-per-coordinate version of the five-tuple combination. The
    /// denominators `1 + c_i j_j` are at least one, so no regularization is
    /// ever needed here.
    pub fn combine(e1: &Self, e2: &Self) -> Result<Self> {
        let d = e1.b.len();
        if e2.b.len() != d {
            return Err(Error::shape("DiagKalmanElement::combine", d, e2.b.len()));
        }
        let mut out = DiagKalmanElement {
            a: DVector::zeros(d),
            b: DVector::zeros(d),
            c: DVector::zeros(d),
            eta: DVector::zeros(d),
            j: DVector::zeros(d),
        };
        for i in 0..d {
            let denom = 1.0 + e1.c[i] * e2.j[i];
            out.a[i] = e2.a[i] * e1.a[i] / denom;
            out.b[i] = e2.a[i] * (e1.b[i] + e1.c[i] * e2.eta[i]) / denom + e2.b[i];
            out.c[i] = e2.a[i] * e2.a[i] * e1.c[i] / denom + e2.c[i];
            out.eta[i] = e1.a[i] * (e2.eta[i] - e2.j[i] * e1.b[i]) / denom + e1.eta[i];
            out.j[i] = e1.a[i] * e1.a[i] * e2.j[i] / denom + e1.j[i];
        }
        Ok(out)
    }
}

/// Build the dense scan elements of an LGSSM.
pub fn dense_elements(m: &Lgssm) -> Vec<KalmanScanElement> {
    let d = m.dim();
    let kap = kappa(m.lambda());
    let fs = match m.dynamics() {
        DynBlocks::Dense(fs) => fs,
        DynBlocks::Diag(_) => panic!("dense elements require dense dynamics"),
    };
    let mut elems = Vec::with_capacity(m.len());
    let y0 = m.emission(0);
    elems.push(KalmanScanElement {
        a: DMatrix::zeros(d, d),
        b: m.init_mean() + kap * (y0 - m.init_mean()),
        c: DMatrix::identity(d, d) * (1.0 - kap),
        eta: DVector::zeros(d),
        j: DMatrix::zeros(d, d),
    });
    for k in 1..m.len() {
        let f = &fs[k - 1];
        let c_off = m.offset(k - 1);
        let y = m.emission(k);
        let innov = y - c_off;
        elems.push(KalmanScanElement {
            a: f * (1.0 - kap),
            b: c_off + kap * &innov,
            c: DMatrix::identity(d, d) * (1.0 - kap),
            eta: f.transpose() * &innov * kap,
            j: f.transpose() * f * kap,
        });
    }
    elems
}

/// Build the diagonal scan elements of an LGSSM.
pub fn diag_elements(m: &Lgssm) -> Vec<DiagKalmanElement> {
    let d = m.dim();
    let kap = kappa(m.lambda());
    let fs = match m.dynamics() {
        DynBlocks::Diag(fs) => fs,
        DynBlocks::Dense(_) => panic!("diagonal elements require diagonal dynamics"),
    };
    let mut elems = Vec::with_capacity(m.len());
    let y0 = m.emission(0);
    elems.push(DiagKalmanElement {
        a: DVector::zeros(d),
        b: m.init_mean() + kap * (y0 - m.init_mean()),
        c: DVector::from_element(d, 1.0 - kap),
        eta: DVector::zeros(d),
        j: DVector::zeros(d),
    });
    for k in 1..m.len() {
        let f = &fs[k - 1];
        let c_off = m.offset(k - 1);
        let innov = m.emission(k) - c_off;
        elems.push(DiagKalmanElement {
            a: f * (1.0 - kap),
            b: c_off + kap * &innov,
            c: DVector::from_element(d, 1.0 - kap),
            eta: f.component_mul(&innov) * kap,
            j: f.component_mul(f) * kap,
        });
    }
    elems
}

/// Kalman filter as a parallel associative scan; prefix `t` carries the
/// filtered mean in `b` and the filtered covariance in `C`. Agrees with the
/// sequential filter to floating-point association order.
pub fn kalman_filter_parallel(m: &Lgssm, exec: &Exec) -> Result<FilterResult> {
    let d = m.dim();
    match m.mode() {
        Mode::Dense => {
            let hits = AtomicUsize::new(0);
            let mut elems = dense_elements(m);
            scan_in_place(
                &mut elems,
                |e1, e2| {
                    KalmanScanElement::combine_counted(e1, e2, Some(&hits))
                        .expect("Kalman combine failed")
                },
                exec,
            )?;
            let means = StateTrace::from_fn(elems.len(), d, |k, j| elems[k].b[j]);
            let covs = elems.into_iter().map(|e| e.c).collect();
            Ok(FilterResult {
                means,
                covariances: Covariances::Dense(covs),
                log_likelihood: None,
                ridge_activations: hits.into_inner(),
            })
        }
        Mode::Diagonal => {
            let mut elems = diag_elements(m);
            scan_in_place(
                &mut elems,
                |e1, e2| DiagKalmanElement::combine(e1, e2).expect("dims checked at build"),
                exec,
            )?;
            let means = StateTrace::from_fn(elems.len(), d, |k, j| elems[k].b[j]);
            let covs = elems.into_iter().map(|e| e.c).collect();
            Ok(FilterResult {
                means,
                covariances: Covariances::Diag(covs),
                log_likelihood: None,
                ridge_activations: 0,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elk::lgssm::build_lgssm;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Random synthetic LGSSM with mildly contractive dynamics.
    pub(crate) fn random_lgssm(d: usize, len: usize, mode: Mode, seed: u64) -> Lgssm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 0.9 / (d as Real).sqrt();
        let dynamics = match mode {
            Mode::Dense => DynBlocks::Dense(
                (0..len - 1)
                    .map(|_| DMatrix::from_fn(d, d, |_, _| rng.random_range(-scale..scale)))
                    .collect(),
            ),
            Mode::Diagonal => DynBlocks::Diag(
                (0..len - 1)
                    .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-0.9..0.9)))
                    .collect(),
            ),
        };
        let offsets = (0..len - 1)
            .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let emissions = (0..len)
            .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let init = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let lambda = (10.0 as Real).powf(rng.random_range(-1.0..1.0));
        Lgssm::from_parts(init, dynamics, offsets, emissions, lambda).unwrap()
    }

    #[test]
    fn scalar_conjugate_update() {
        // D=1, T=1, prior N(0, 1), emission y = 1 with variance 1:
        // posterior mean 1/2, variance 1/2.
        let m = Lgssm::from_parts(
            DVector::from_element(1, 0.0),
            DynBlocks::Dense(vec![]),
            vec![],
            vec![DVector::from_element(1, 1.0)],
            1.0,
        )
        .unwrap();
        let f = kalman_filter_sequential(&m).unwrap();
        assert!((f.means.row(0)[0] - 0.5).abs() < 1e-14);
        assert!((f.covariances.dense_at(0)[(0, 0)] - 0.5).abs() < 1e-14);

        // T=1 parallel filter is the same single update.
        let p = kalman_filter_parallel(&m, &Exec::sequential()).unwrap();
        assert!((p.means.row(0)[0] - 0.5).abs() < 1e-14);
        assert!((p.covariances.dense_at(0)[(0, 0)] - 0.5).abs() < 1e-14);

        // And the smoother of a single step is the filter.
        let s = kalman_smoother(&m).unwrap();
        assert!((s.row(0)[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn huge_lambda_pins_means_to_emissions() {
        let m = random_lgssm(3, 40, Mode::Dense, 1);
        let m = Lgssm::from_parts(
            m.init_mean().clone(),
            m.dynamics().clone(),
            (0..39).map(|k| m.offset(k).clone()).collect(),
            (0..40).map(|k| m.emission(k).clone()).collect(),
            1e12,
        )
        .unwrap();
        let f = kalman_filter_sequential(&m).unwrap();
        for k in 0..40 {
            for j in 0..3 {
                assert!((f.means.row(k)[j] - m.emission(k)[j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn tiny_lambda_returns_dynamics_rollout() {
        let m = random_lgssm(3, 30, Mode::Dense, 2);
        let m = Lgssm::from_parts(
            m.init_mean().clone(),
            m.dynamics().clone(),
            (0..29).map(|k| m.offset(k).clone()).collect(),
            (0..30).map(|k| m.emission(k).clone()).collect(),
            1e-12,
        )
        .unwrap();
        let f = kalman_filter_sequential(&m).unwrap();
        let mut rollout = m.init_mean().clone();
        for k in 0..30 {
            if k > 0 {
                rollout = m.apply_dynamics(k - 1, &rollout) + m.offset(k - 1);
            }
            for j in 0..3 {
                assert!((f.means.row(k)[j] - rollout[j]).abs() < 1e-4);
            }
        }
        // The smoother collapses to the same rollout: no emission information.
        let s = kalman_smoother(&m).unwrap();
        for k in 0..30 {
            for j in 0..3 {
                assert!((s.row(k)[j] - f.means.row(k)[j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn parallel_matches_sequential_dense_and_diag() {
        for seed in 0..6 {
            for mode in [Mode::Dense, Mode::Diagonal] {
                let m = random_lgssm(4, 128, mode, 100 + seed);
                let seq = kalman_filter_sequential(&m).unwrap();
                let exec = Exec::new(4).unwrap().with_chunk_size(13);
                let par = kalman_filter_parallel(&m, &exec).unwrap();
                let mut worst: Real = 0.0;
                for k in 0..128 {
                    for j in 0..4 {
                        worst = worst.max((seq.means.row(k)[j] - par.means.row(k)[j]).abs());
                    }
                    let cs = seq.covariances.dense_at(k);
                    let cp = par.covariances.dense_at(k);
                    worst = worst.max((cs - cp).abs().max());
                }
                assert!(worst < 1e-8, "{mode} seed {seed}: {worst}");
                assert_eq!(par.ridge_activations, 0);
            }
        }
    }

    #[test]
    fn dense_element_combination_is_associative() {
        let mut worst: Real = 0.0;
        for seed in 0..40 {
            let m = random_lgssm(3, 4, Mode::Dense, 400 + seed);
            let e = dense_elements(&m);
            let l =
                KalmanScanElement::combine(&KalmanScanElement::combine(&e[1], &e[2]).unwrap(), &e[3])
                    .unwrap();
            let r =
                KalmanScanElement::combine(&e[1], &KalmanScanElement::combine(&e[2], &e[3]).unwrap())
                    .unwrap();
            worst = worst
                .max((&l.a - &r.a).abs().max())
                .max((&l.b - &r.b).abs().max())
                .max((&l.c - &r.c).abs().max())
                .max((&l.eta - &r.eta).abs().max())
                .max((&l.j - &r.j).abs().max());
        }
        assert!(worst < 1e-7, "associativity defect {worst}");
    }

    #[test]
    fn smoother_is_consistent_with_filter_at_final_step() {
        let m = random_lgssm(3, 50, Mode::Dense, 9);
        let f = kalman_filter_sequential(&m).unwrap();
        let s = kalman_smoother(&m).unwrap();
        for j in 0..3 {
            assert!((s.row(49)[j] - f.means.row(49)[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_covariances_stay_exactly_diagonal() {
        // Dense filtering of genuinely diagonal dynamics keeps off-diagonal
        // entries at exactly zero, and matches the diagonal-mode filter.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let len = 20;
        let fs_diag: Vec<DVector<Real>> = (0..len - 1)
            .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-0.9..0.9)))
            .collect();
        let offsets: Vec<DVector<Real>> = (0..len - 1)
            .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let emissions: Vec<DVector<Real>> = (0..len)
            .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let init = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));

        let dense = Lgssm::from_parts(
            init.clone(),
            DynBlocks::Dense(fs_diag.iter().map(DMatrix::from_diagonal).collect()),
            offsets.clone(),
            emissions.clone(),
            0.8,
        )
        .unwrap();
        let diag = Lgssm::from_parts(init, DynBlocks::Diag(fs_diag), offsets, emissions, 0.8).unwrap();

        let fd = kalman_filter_sequential(&dense).unwrap();
        let fg = kalman_filter_sequential(&diag).unwrap();
        for k in 0..len {
            let cd = fd.covariances.dense_at(k);
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        assert_eq!(cd[(i, j)], 0.0, "off-diagonal leaked at t={k}");
                    }
                }
            }
            for j in 0..d {
                assert!((fd.means.row(k)[j] - fg.means.row(k)[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn filter_of_model_lgssm_runs() {
        let model = crate::models::Gru::random(3, 3, 16, 8);
        let trace = crate::eval::sequential_evaluate(&model, 16).unwrap();
        let g = build_lgssm(&trace, &model, 2.0, Mode::Dense).unwrap();
        let f = kalman_filter_sequential(&g).unwrap();
        assert!(f.log_likelihood.unwrap().is_finite());
    }
}
