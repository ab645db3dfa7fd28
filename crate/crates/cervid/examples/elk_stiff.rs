//! The stability contrast on stiff saturating dynamics: the undamped Newton
//! recurrence overflows (triggering the reset heuristic), while the damped
//! Kalman iteration never leaves the finite regime.
//!
//! ```text
//! cargo run --release --example elk_stiff
//! ```

use cervid::deer::{deer_solve, DeerConfig};
use cervid::elk::{elk_solve, ElkConfig};
use cervid::eval::{mad, sequential_evaluate};
use cervid::models::TanhDynamics;
use cervid::{Mode, StateTrace};

fn main() {
    // Gain-5 dynamics: local Jacobian gain ~5, so the T-step linear
    // recurrence grows like 5^T and overflows for T above ~440.
    let (d, t) = (4, 1024);
    let model = TanhDynamics::random(d, 5.0, 0);
    let truth = sequential_evaluate(&model, t).expect("oracle");
    let init = StateTrace::zeros(t, d);

    let (out, deer) = deer_solve(
        &init,
        &model,
        &DeerConfig::new(Mode::Dense).with_max_iters(2000),
    )
    .expect("deer");
    println!(
        "dense Newton + resets: converged={} iterations={} reset events={} MAD={:.3e}",
        deer.converged,
        deer.iterations,
        deer.reset_events.len(),
        mad(&out, &truth).unwrap(),
    );
    if let Some(e) = deer.reset_events.first() {
        println!(
            "  first overflow at iteration {} (trace row {})",
            e.iteration, e.first_bad_row
        );
    }

    for mode in [Mode::Dense, Mode::Diagonal] {
        let config = ElkConfig::new(1.0, mode).with_max_iters(8000);
        let (out, elk) = elk_solve(&init, &model, &config).expect("elk");
        println!(
            "{:>8} damped (lambda=1): converged={} iterations={} non-finite iterates={} MAD={:.3e}",
            mode.to_string(),
            elk.converged,
            elk.iterations,
            elk.nonfinite_iterations,
            mad(&out, &truth).unwrap(),
        );
    }
}
