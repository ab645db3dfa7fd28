//! Prefix correctness of the undamped Newton iteration: after iteration `i`
//! the first `i` steps of the trace already carry zero residual, so the
//! converged prefix grows by at least one row per iteration regardless of
//! the initialization.
//!
//! ```text
//! cargo run --release --example prefix_convergence
//! ```

use cervid::deer::{deer_step, prefix_converged_len};
use cervid::models::Gru;
use cervid::{Mode, Real, StateTrace};

fn main() {
    let (d, t, tol) = (4, 32, 1e-8);
    let model = Gru::random(d, d, t, 5);
    let mut trace = StateTrace::from_fn(t, d, |k, j| ((k * d + j) as Real * 0.61).sin());

    println!("iteration  converged-prefix (of {t})");
    for i in 0..=16 {
        let prefix = prefix_converged_len(&trace, &model, tol).expect("prefix");
        println!("{i:>9}  {prefix:>16}");
        assert!(prefix >= i, "prefix fell behind the iteration count");
        if prefix == t {
            println!("fully converged after {i} iterations");
            break;
        }
        trace = deer_step(&trace, &model, Mode::Dense).expect("step");
    }
}
