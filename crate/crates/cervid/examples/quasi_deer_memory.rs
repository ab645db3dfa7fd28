//! Element-storage accounting: dense Newton keeps T full Jacobian blocks
//! (Theta(T D^2) memory) while the quasi-Newton variant keeps only their
//! diagonals (Theta(T D)). The ratio of the two grows linearly in D.
//!
//! ```text
//! cargo run --release --example quasi_deer_memory
//! ```

use cervid::deer::{deer_solve, DeerConfig};
use cervid::models::Gru;
use cervid::{Mode, StateTrace};

fn main() {
    let t = 512;
    println!("{:>4} {:>14} {:>14} {:>8}", "D", "dense bytes", "diag bytes", "ratio");
    for d in [8, 16, 32, 64] {
        let model = Gru::random(d, d, t, 1);
        let init = StateTrace::zeros(t, d);
        let mut bytes = [0u64; 2];
        for (i, mode) in [Mode::Dense, Mode::Diagonal].into_iter().enumerate() {
            let (_, report) = deer_solve(&init, &model, &DeerConfig::new(mode)).expect("solve");
            assert!(report.converged);
            bytes[i] = report.element_matrix_bytes;
        }
        println!(
            "{d:>4} {:>14} {:>14} {:>8.1}",
            bytes[0],
            bytes[1],
            bytes[0] as f64 / bytes[1] as f64
        );
    }
}
