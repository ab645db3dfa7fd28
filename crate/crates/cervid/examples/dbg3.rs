use cervid::deer::{deer_solve, DeerConfig, ResetPolicy};
use cervid::elk::{elk_solve, ElkConfig};
use cervid::models::{ArGru, TanhDynamics};
use cervid::dynamics::DynamicsModel;
use cervid::{Mode, StateTrace};
use std::io::Write;
use std::time::Instant;

fn main() {
    let t = 10_000;
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("tanh");
    let scale: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let lambda: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    for seed in [0u64, 1] {
        let model: Box<dyn DynamicsModel + Send + Sync> = match which {
            "tanh" => Box::new(TanhDynamics::random(4, 5.0, seed)),
            _ => Box::new(ArGru::fitted_noisy_sine_with_scale(t, seed, scale)),
        };
        let m = model.as_ref();
        let init = StateTrace::zeros(t, m.state_dim());
        let start = Instant::now();
        let cfg = DeerConfig {
            record_history: false,
            reset_policy: ResetPolicy::Suffix,
            ..DeerConfig::new(Mode::Dense).with_max_iters(30_000).with_workers(2)
        };
        let (_, dr) = deer_solve(&init, m, &cfg).unwrap();
        println!("{which}/{seed} suffix-deer: conv={} it={} resets={} final={:.1e} [{:.0}s]",
            dr.converged, dr.iterations, dr.reset_events.len(), dr.final_residual, start.elapsed().as_secs_f64());
        std::io::stdout().flush().unwrap();
        for mode in [Mode::Dense, Mode::Diagonal] {
            let start = Instant::now();
            let cfg = ElkConfig { record_history: false, ..ElkConfig::new(lambda, mode).with_max_iters(25_000) };
            let (_, er) = elk_solve(&init, m, &cfg).unwrap();
            println!("{which}/{seed} elk {mode} l={lambda}: conv={} it={} nonfin={} [{:.0}s]",
                er.converged, er.iterations, er.nonfinite_iterations, start.elapsed().as_secs_f64());
            std::io::stdout().flush().unwrap();
        }
    }
}
