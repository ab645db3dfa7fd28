//! Choose the damping weight by a sweep over log-spaced values: too small
//! risks instability, too large crawls. The winner is the fastest converged
//! run (ties to the smaller value).
//!
//! ```text
//! cargo run --release --example lambda_sweep
//! ```

use cervid::elk::{default_lambda_grid, lambda_sweep, ElkConfig};
use cervid::models::ArGru;
use cervid::{Mode, StateTrace};

fn main() {
    let t = 512;
    let model = ArGru::random(3, t, 11); // expanded state (x, h): D = 4
    let init = StateTrace::zeros(t, 4);
    let config = ElkConfig::new(1.0, Mode::Dense).with_max_iters(3000);

    let outcome = lambda_sweep(&init, &model, &config, &default_lambda_grid()).expect("sweep");
    println!("{:>12} {:>10} {:>8} {:>12}", "lambda", "converged", "iters", "residual");
    for (lambda, report) in &outcome.runs {
        println!(
            "{lambda:>12.1e} {:>10} {:>8} {:>12.3e}",
            report.converged, report.iterations, report.final_residual
        );
    }
    match outcome.best_lambda {
        Some(best) => println!("selected lambda = {best:e}"),
        None => println!("no grid point converged"),
    }
}
