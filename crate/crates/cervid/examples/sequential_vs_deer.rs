//! Evaluate an untrained GRU sequentially and with DEER / quasi-DEER, and
//! compare the converged traces against the sequential oracle.
//!
//! ```text
//! cargo run --release --example sequential_vs_deer
//! ```

use cervid::deer::{deer_solve, DeerConfig};
use cervid::eval::{mad, sequential_evaluate};
use cervid::models::Gru;
use cervid::{Mode, StateTrace};
use std::time::Instant;

fn main() {
    let (d, t, seed) = (16, 4096, 7);
    let model = Gru::random(d, d, t, seed);

    let start = Instant::now();
    let truth = sequential_evaluate(&model, t).expect("sequential evaluation");
    println!(
        "sequential oracle: T={t}, D={d}, {:.2} ms",
        start.elapsed().as_secs_f64() * 1e3
    );

    let init = StateTrace::zeros(t, d);
    for mode in [Mode::Dense, Mode::Diagonal] {
        let config = DeerConfig::new(mode).with_workers(0);
        let start = Instant::now();
        let (solved, report) = deer_solve(&init, &model, &config).expect("solve");
        let wall = start.elapsed().as_secs_f64() * 1e3;
        println!(
            "{:>8} Newton: converged={} in {:>3} iterations, MAD vs oracle = {:.3e}, \
             element storage {:>10} bytes, {:.2} ms",
            mode.to_string(),
            report.converged,
            report.iterations,
            mad(&solved, &truth).unwrap(),
            report.element_matrix_bytes,
            wall,
        );
    }
}
