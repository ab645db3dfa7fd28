//! cervid — parallel evaluation of nonlinear recurrent state-space models.
//!
//! Evaluating a nonlinear Markovian state-space model (an RNN unrolled over
//! `T` steps) is normally an inherently sequential `O(T)` computation. This
//! crate instead treats the full trace `s_{1:T}` as the unique root of the
//! one-step residual `r_t = s_t - f_t(s_{t-1})` and solves for it with
//! Newton-type iterations whose inner linear solves are parallel associative
//! scans over the sequence length:
//!
//! * **DEER** — undamped Newton. Each iteration solves the block-bidiagonal
//!   linearized system by a parallel affine scan. Converges in at most `T`
//!   iterations for any initialization, with a reset heuristic for numerical
//!   blow-ups.
//! * **quasi-DEER** — DEER with each dynamics Jacobian replaced by its
//!   diagonal, cutting per-iteration work/memory from `O(TD^3)`/`O(TD^2)` to
//!   `O(TD)`/`O(TD)`.
//! * **ELK** — Levenberg-Marquardt damped Newton. Each step is the MAP trace
//!   of a linear Gaussian state-space model built from the current
//!   linearization, computed by (parallel-scan) Kalman filtering or RTS
//!   smoothing. The damping weight `lambda` is a hyperparameter chosen by a
//!   log-spaced sweep.
//! * **quasi-ELK** — ELK with diagonal Jacobians; every Kalman covariance
//!   stays diagonal end to end.
//!
//! An exact sequential evaluator serves as the ground-truth oracle and a CLI
//! (`cervid evaluate|benchmark|sweep`) drives convergence and timing studies.
//!
//! # Quick start
//!
//! ```
//! use cervid::{deer, eval, models, Mode};
//!
//! let model = models::Gru::random(8, 8, 64, 42); // D=8, inputs D=8, T=64
//! let truth = eval::sequential_evaluate(&model, 64).unwrap();
//!
//! let init = cervid::StateTrace::zeros(64, 8);
//! let config = deer::DeerConfig::new(Mode::Dense);
//! let (solved, report) = deer::deer_solve(&init, &model, &config).unwrap();
//!
//! assert!(report.converged);
//! assert!(eval::mad(&solved, &truth).unwrap() < 1e-6);
//! ```
//!
//! # Runnable examples
//!
//! Each major capability has a standalone example under `examples/`:
//!
//! ```text
//! cargo run --release --example sequential_vs_deer    # DEER vs the sequential oracle
//! cargo run --release --example quasi_deer_memory     # dense vs diagonal storage accounting
//! cargo run --release --example elk_stiff             # stiff dynamics: resets vs damping
//! cargo run --release --example lambda_sweep          # log-spaced trust-region sweep
//! cargo run --release --example kalman_parallel       # sequential vs parallel-scan filtering
//! cargo run --release --example prefix_convergence    # prefix-correctness of Newton iterates
//! ```
//!
//! # Conventions
//!
//! States are `D`-vectors, traces are `T x D`. Time indices are 1-based in
//! prose (`f_t`, `s_t` for `t = 1..=T`, with `s_0` the fixed initial state)
//! and 0-based in storage: row `k` of a [`StateTrace`] holds `s_{k+1}`.
//! Inputs and per-step noise are absorbed into the time-varying `f_t` when a
//! model is constructed; solvers never see a separate input stream.
//!
//! All arithmetic is `f64` by default; building with `--features f32`
//! switches the [`Real`] scalar to single precision.

/// Crate-wide scalar type. `f64` unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Crate-wide scalar type. `f64` unless the `f32` feature is enabled.
#[cfg(feature = "f32")]
pub type Real = f32;

mod error;

pub mod cli;
pub mod deer;
pub mod dynamics;
pub mod elk;
pub mod eval;
pub mod exec;
pub mod models;
pub mod report;
pub mod scan;
pub mod trace;

pub use error::{Error, Result};
pub use exec::Exec;
pub use report::{ResetEvent, SolveReport};
pub use trace::{ResidualTrace, StateTrace};

use serde::{Deserialize, Serialize};

/// Jacobian representation used by the scan-based solvers.
///
/// `Dense` keeps full `D x D` blocks (exact Newton); `Diagonal` keeps only
/// the Jacobian diagonals, which is what the quasi-Newton variants use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dense,
    Diagonal,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Dense => write!(f, "dense"),
            Mode::Diagonal => write!(f, "diagonal"),
        }
    }
}

/// Identifier embedded at compile time for report provenance.
pub fn build_id() -> &'static str {
    env!("CERVID_BUILD_ID")
}
