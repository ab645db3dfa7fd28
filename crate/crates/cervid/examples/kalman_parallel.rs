//! Kalman filtering as a parallel associative scan: build a random LGSSM,
//! filter it both with the classical sequential recursion and with the
//! five-tuple message scan, and compare.
//!
//! ```text
//! cargo run --release --example kalman_parallel
//! ```

use cervid::elk::{kalman_filter_parallel, kalman_filter_sequential, DynBlocks, Lgssm};
use cervid::{Exec, Real};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let (d, t) = (4, 2048);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scale = 0.9 / (d as Real).sqrt();
    let dynamics: Vec<DMatrix<Real>> = (0..t - 1)
        .map(|_| DMatrix::from_fn(d, d, |_, _| rng.random_range(-scale..scale)))
        .collect();
    let offsets: Vec<DVector<Real>> = (0..t - 1)
        .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let emissions: Vec<DVector<Real>> = (0..t)
        .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)))
        .collect();
    let init = DVector::zeros(d);
    let model = Lgssm::from_parts(init, DynBlocks::Dense(dynamics), offsets, emissions, 2.0)
        .expect("valid LGSSM");

    let sequential = kalman_filter_sequential(&model).expect("sequential filter");
    let exec = Exec::new(0).expect("pool");
    let parallel = kalman_filter_parallel(&model, &exec).expect("parallel filter");

    let mut worst_mean: Real = 0.0;
    let mut worst_cov: Real = 0.0;
    for k in 0..t {
        for j in 0..d {
            worst_mean =
                worst_mean.max((sequential.means.row(k)[j] - parallel.means.row(k)[j]).abs());
        }
        let cs = sequential.covariances.dense_at(k);
        let cp = parallel.covariances.dense_at(k);
        worst_cov = worst_cov.max((cs - cp).abs().max());
    }
    println!("T={t}, D={d}, workers={}", exec.workers());
    println!("max |mean difference|       = {worst_mean:.3e}");
    println!("max |covariance difference| = {worst_cov:.3e}");
    println!(
        "sequential log-likelihood   = {:.6}",
        sequential.log_likelihood.unwrap()
    );
}
