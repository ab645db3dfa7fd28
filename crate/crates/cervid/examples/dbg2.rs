use cervid::elk::{elk_solve, ElkConfig};
use cervid::models::ArGru;
use cervid::dynamics::DynamicsModel;
use cervid::{Mode, StateTrace};
use std::io::Write;

fn main() {
    for t in [512usize, 2000] {
        for seed in [0u64, 1] {
            let m = ArGru::fitted_noisy_sine(t, seed);
            let init = StateTrace::zeros(t, m.state_dim());
            for mode in [Mode::Dense, Mode::Diagonal] {
                for lambda in [3.0, 10.0, 30.0, 100.0, 300.0] {
                    let cfg = ElkConfig { record_history: false, ..ElkConfig::new(lambda, mode).with_max_iters(20_000) };
                    let (_, r) = elk_solve(&init, &m, &cfg).unwrap();
                    print!("  T={t} seed={seed} {mode} l={lambda}: {}", if r.converged { format!("{}", r.iterations) } else { "FAIL".into() });
                    std::io::stdout().flush().unwrap();
                }
                println!();
            }
        }
    }
}
