use cervid::deer::{deer_solve, DeerConfig};
use cervid::elk::{elk_solve, ElkConfig};
use cervid::models::{ArGru, TanhDynamics};
use cervid::dynamics::DynamicsModel;
use cervid::{Mode, StateTrace};
use std::io::Write;
use std::time::Instant;

fn main() {
    let t = 10_000;
    for seed in [0u64, 1] {
        let tanh = TanhDynamics::random(4, 5.0, seed);
        let sine = ArGru::fitted_noisy_sine(t, seed);
        let models: [(&str, &dyn DynamicsModel); 2] = [("tanh", &tanh), ("sine", &sine)];
        for (name, m) in models {
            let init = StateTrace::zeros(t, m.state_dim());
            let start = Instant::now();
            let cfg = DeerConfig { record_history: false, ..DeerConfig::new(Mode::Dense).with_max_iters(12_000).with_workers(2) };
            let (_, dr) = deer_solve(&init, m, &cfg).unwrap();
            println!("{name}/{seed} deer : conv={} iters={} resets={} final={:.1e} [{:.0}s, {:.2} ms/it]",
                dr.converged, dr.iterations, dr.reset_events.len(), dr.final_residual,
                start.elapsed().as_secs_f64(), 1e3*start.elapsed().as_secs_f64()/dr.iterations.max(1) as f64);
            std::io::stdout().flush().unwrap();
            for lambda in [0.1, 1.0] {
                for mode in [Mode::Dense, Mode::Diagonal] {
                    let start = Instant::now();
                    let cfg = ElkConfig { record_history: false, ..ElkConfig::new(lambda, mode).with_max_iters(25_000) };
                    let (_, er) = elk_solve(&init, m, &cfg).unwrap();
                    println!("{name}/{seed} elk {mode} l={lambda}: conv={} iters={} nonfin={} final={:.1e} [{:.0}s, {:.2} ms/it]",
                        er.converged, er.iterations, er.nonfinite_iterations, er.final_residual,
                        start.elapsed().as_secs_f64(), 1e3*start.elapsed().as_secs_f64()/er.iterations.max(1) as f64);
                    std::io::stdout().flush().unwrap();
                }
            }
        }
    }
}
