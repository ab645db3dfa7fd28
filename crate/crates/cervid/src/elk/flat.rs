//! Allocation-free sequential filtering for the solver hot loop.
//!
//! The public [`Lgssm`](super::Lgssm) API keeps per-step nalgebra blocks for
//! readability; at `T = 10_000` and hundreds of damped iterations the
//! allocation churn dominates, so `elk_solve` uses this packed mirror: flat
//! row-major buffers rebuilt in place every iteration and a hand-rolled
//! Cholesky update. Equivalence with the public sequential filter is pinned
//! by the tests at the bottom.

use rayon::prelude::*;

use crate::dynamics::DynamicsModel;
use crate::exec::Exec;
use crate::trace::StateTrace;
use crate::{Error, Mode, Real, Result};

/// Packed step LGSSM. Emissions are the current iterate itself and are
/// passed separately to avoid a copy.
pub(crate) struct FlatLgssm {
    mode: Mode,
    dim: usize,
    len: usize,
    lambda: Real,
    init_mean: Vec<Real>,
    /// `(len-1)` dynamics blocks, `d*d` (dense) or `d` (diagonal) each.
    f: Vec<Real>,
    /// `(len-1)` offsets `c_t = f_t(s) - F_t s`.
    c: Vec<Real>,
}

impl FlatLgssm {
    pub fn new(mode: Mode, dim: usize, len: usize) -> Self {
        let fs = match mode {
            Mode::Dense => dim * dim,
            Mode::Diagonal => dim,
        };
        FlatLgssm {
            mode,
            dim,
            len,
            lambda: 1.0,
            init_mean: vec![0.0; dim],
            f: vec![0.0; (len - 1) * fs],
            c: vec![0.0; (len - 1) * dim],
        }
    }

    fn f_stride(&self) -> usize {
        match self.mode {
            Mode::Dense => self.dim * self.dim,
            Mode::Diagonal => self.dim,
        }
    }

    /// Relinearize around `trace` in place.
    pub fn rebuild<M: DynamicsModel + ?Sized>(
        &mut self,
        trace: &StateTrace,
        model: &M,
        lambda: Real,
        exec: &Exec,
    ) {
        let d = self.dim;
        let fs = self.f_stride();
        let mode = self.mode;
        debug_assert_eq!(trace.len(), self.len);
        debug_assert_eq!(trace.dim(), d);
        self.lambda = lambda;
        model.step(1, model.initial_state(), &mut self.init_mean);

        let fill = |k: usize, f_blk: &mut [Real], c_blk: &mut [Real]| {
            let point = trace.row(k);
            match mode {
                Mode::Dense => {
                    model.jacobian(k + 2, point, f_blk);
                    model.step(k + 2, point, c_blk);
                    for i in 0..d {
                        let row = &f_blk[i * d..(i + 1) * d];
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += row[j] * point[j];
                        }
                        c_blk[i] -= acc;
                    }
                }
                Mode::Diagonal => {
                    model.jacobian_diag(k + 2, point, f_blk);
                    model.step(k + 2, point, c_blk);
                    for j in 0..d {
                        c_blk[j] -= f_blk[j] * point[j];
                    }
                }
            }
        };

        if exec.is_parallel() && self.len > 2 {
            let chunk = exec.chunk_size(self.len - 1);
            let (f_buf, c_buf) = (&mut self.f, &mut self.c);
            exec.install(|| {
                f_buf
                    .par_chunks_mut(chunk * fs)
                    .zip(c_buf.par_chunks_mut(chunk * d))
                    .enumerate()
                    .for_each(|(ci, (f_chunk, c_chunk))| {
                        let base = ci * chunk;
                        for (r, (f_blk, c_blk)) in
                            f_chunk.chunks_mut(fs).zip(c_chunk.chunks_mut(d)).enumerate()
                        {
                            fill(base + r, f_blk, c_blk);
                        }
                    });
            });
        } else {
            for k in 0..self.len - 1 {
                let (f_buf, c_buf) = (&mut self.f, &mut self.c);
                fill(k, &mut f_buf[k * fs..(k + 1) * fs], &mut c_buf[k * d..(k + 1) * d]);
            }
        }
    }
}

/// Reusable buffers for one filter pass.
pub(crate) struct FilterScratch {
    mean: Vec<Real>,
    cov: Vec<Real>,
    s: Vec<Real>,
    x: Vec<Real>,
    tmp: Vec<Real>,
    innov: Vec<Real>,
}

impl FilterScratch {
    pub fn new(dim: usize) -> Self {
        FilterScratch {
            mean: vec![0.0; dim],
            cov: vec![0.0; dim * dim],
            s: vec![0.0; dim * dim],
            x: vec![0.0; dim * dim],
            tmp: vec![0.0; dim * dim],
            innov: vec![0.0; dim],
        }
    }
}

/// In-place Cholesky of a row-major SPD matrix (lower triangle written).
/// Returns false if a pivot is not strictly positive.
fn cholesky_in_place(a: &mut [Real], d: usize) -> bool {
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= a[i * d + k] * a[j * d + k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return false;
                }
                a[i * d + i] = sum.sqrt();
            } else {
                a[i * d + j] = sum / a[j * d + j];
            }
        }
    }
    true
}

/// Solves `L L^T x = b` in place for one right-hand side.
fn chol_solve_vec(l: &[Real], d: usize, b: &mut [Real]) {
    for i in 0..d {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * d + k] * b[k];
        }
        b[i] = sum / l[i * d + i];
    }
    for i in (0..d).rev() {
        let mut sum = b[i];
        for k in i + 1..d {
            sum -= l[k * d + i] * b[k];
        }
        b[i] = sum / l[i * d + i];
    }
}

/// Filtered means of the packed LGSSM with emissions `y_t = emissions.row(t)`,
/// written into `out` (row-major `T x D`). No allocation after `scratch`.
pub(crate) fn filter_means_flat(
    g: &FlatLgssm,
    emissions: &StateTrace,
    out: &mut [Real],
    scratch: &mut FilterScratch,
) -> Result<()> {
    let d = g.dim;
    let len = g.len;
    let r_var = 1.0 / g.lambda;

    match g.mode {
        Mode::Dense => {
            let sc = &mut *scratch;
            sc.mean.copy_from_slice(&g.init_mean);
            // P_1 = I
            sc.cov.fill(0.0);
            for i in 0..d {
                sc.cov[i * d + i] = 1.0;
            }
            for k in 0..len {
                if k > 0 {
                    let f = &g.f[(k - 1) * d * d..k * d * d];
                    let c = &g.c[(k - 1) * d..k * d];
                    // mean <- F mean + c
                    for i in 0..d {
                        let row = &f[i * d..(i + 1) * d];
                        let mut acc = c[i];
                        for j in 0..d {
                            acc += row[j] * sc.mean[j];
                        }
                        sc.innov[i] = acc;
                    }
                    sc.mean.copy_from_slice(&sc.innov);
                    // cov <- F cov F^T + I
                    sc.tmp.fill(0.0);
                    for i in 0..d {
                        for kk in 0..d {
                            let v = f[i * d + kk];
                            if v != 0.0 {
                                let src = &sc.cov[kk * d..(kk + 1) * d];
                                let dst = &mut sc.tmp[i * d..(i + 1) * d];
                                for j in 0..d {
                                    dst[j] += v * src[j];
                                }
                            }
                        }
                    }
                    // cov = tmp * F^T + I
                    for i in 0..d {
                        for j in 0..d {
                            let mut acc = 0.0;
                            let trow = &sc.tmp[i * d..(i + 1) * d];
                            let frow = &f[j * d..(j + 1) * d];
                            for kk in 0..d {
                                acc += trow[kk] * frow[kk];
                            }
                            sc.cov[i * d + j] = acc + if i == j { 1.0 } else { 0.0 };
                        }
                    }
                }
                // S = P + r I; factor
                sc.s.copy_from_slice(&sc.cov);
                for i in 0..d {
                    sc.s[i * d + i] += r_var;
                }
                if !cholesky_in_place(&mut sc.s, d) {
                    return Err(Error::Numerical {
                        row: k,
                        message: "innovation covariance lost positive-definiteness".into(),
                    });
                }
                // X = S^{-1} P (solve per column of P; X stored column-major
                // in x: x[col * d + row]).
                for col in 0..d {
                    for row in 0..d {
                        sc.tmp[row] = sc.cov[row * d + col];
                    }
                    chol_solve_vec(&sc.s, d, &mut sc.tmp[..d]);
                    for row in 0..d {
                        sc.x[col * d + row] = sc.tmp[row];
                    }
                }
                // innov = y - mean; mean += K innov with K = X^T
                let y = emissions.row(k);
                for i in 0..d {
                    sc.innov[i] = y[i] - sc.mean[i];
                }
                for i in 0..d {
                    // K[i, j] = X[j, i] = x[i * d + j] (column-major x)
                    let xcol = &sc.x[i * d..(i + 1) * d];
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += xcol[j] * sc.innov[j];
                    }
                    sc.mean[i] += acc;
                }
                // P <- P - K P = P - X^T P; then symmetrize
                sc.tmp.fill(0.0);
                for i in 0..d {
                    let xcol = &sc.x[i * d..(i + 1) * d];
                    for kk in 0..d {
                        let v = xcol[kk];
                        if v != 0.0 {
                            let src = &sc.cov[kk * d..(kk + 1) * d];
                            let dst = &mut sc.tmp[i * d..(i + 1) * d];
                            for j in 0..d {
                                dst[j] += v * src[j];
                            }
                        }
                    }
                }
                for i in 0..d {
                    for j in 0..d {
                        sc.cov[i * d + j] -= sc.tmp[i * d + j];
                    }
                }
                for i in 0..d {
                    for j in 0..i {
                        let v = 0.5 * (sc.cov[i * d + j] + sc.cov[j * d + i]);
                        sc.cov[i * d + j] = v;
                        sc.cov[j * d + i] = v;
                    }
                }
                out[k * d..(k + 1) * d].copy_from_slice(&sc.mean);
            }
        }
        Mode::Diagonal => {
            let sc = &mut *scratch;
            sc.mean.copy_from_slice(&g.init_mean);
            sc.cov[..d].fill(1.0);
            for k in 0..len {
                if k > 0 {
                    let f = &g.f[(k - 1) * d..k * d];
                    let c = &g.c[(k - 1) * d..k * d];
                    for i in 0..d {
                        sc.mean[i] = f[i] * sc.mean[i] + c[i];
                        sc.cov[i] = f[i] * f[i] * sc.cov[i] + 1.0;
                    }
                }
                let y = emissions.row(k);
                for i in 0..d {
                    let s = sc.cov[i] + r_var;
                    if !(s > 0.0) {
                        return Err(Error::Numerical {
                            row: k,
                            message: "non-positive innovation variance".into(),
                        });
                    }
                    let gain = sc.cov[i] / s;
                    sc.mean[i] += gain * (y[i] - sc.mean[i]);
                    sc.cov[i] *= 1.0 - gain;
                }
                out[k * d..(k + 1) * d].copy_from_slice(&sc.mean);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elk::{build_lgssm, kalman_filter_sequential};
    use crate::models::Gru;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// The packed hot-loop filter and the public sequential filter are two
    /// implementations of the same recursion; pin them together.
    #[test]
    fn flat_filter_matches_public_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for mode in [Mode::Dense, Mode::Diagonal] {
            for seed in 0..5 {
                let (d, t) = (4, 64);
                let model = Gru::random(d, d, t, 900 + seed);
                let trace = StateTrace::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0));
                let lambda = (10.0 as Real).powf(rng.random_range(-2.0..2.0));

                let public = build_lgssm(&trace, &model, lambda, mode).unwrap();
                let expect = kalman_filter_sequential(&public).unwrap();

                let mut flat = FlatLgssm::new(mode, d, t);
                flat.rebuild(&trace, &model, lambda, &Exec::sequential());
                let mut out = vec![0.0; t * d];
                let mut scratch = FilterScratch::new(d);
                filter_means_flat(&flat, &trace, &mut out, &mut scratch).unwrap();

                let mut worst: Real = 0.0;
                for k in 0..t {
                    for j in 0..d {
                        worst = worst.max((expect.means.row(k)[j] - out[k * d + j]).abs());
                    }
                }
                assert!(worst < 1e-11, "{mode} seed {seed}: {worst}");
            }
        }
    }

    #[test]
    fn cholesky_solve_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let d = 5;
            let m = nalgebra::DMatrix::<Real>::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let spd = &m * m.transpose() + nalgebra::DMatrix::identity(d, d);
            let b = nalgebra::DVector::<Real>::from_fn(d, |_, _| rng.random_range(-1.0..1.0));

            let mut flat: Vec<Real> = (0..d * d).map(|i| spd[(i / d, i % d)]).collect();
            assert!(cholesky_in_place(&mut flat, d));
            let mut x = b.as_slice().to_vec();
            chol_solve_vec(&flat, d, &mut x);

            let expect = spd.cholesky().unwrap().solve(&b);
            for i in 0..d {
                assert!((x[i] - expect[i]).abs() < 1e-10);
            }
        }
    }
}
