//! Controller synthesis and verification for ensembles of identical
//! discrete-time linear subsystems whose weighted-average behavior is pinned
//! to a prescribed linear feedback law.
//!
//! Every subsystem evolves as `x_{k+1} = A x_k + B u_k` and pays the usual
//! quadratic stage cost. The only coupling is the constraint
//! `ū_k = F̄_k x̄_k` on the μ-weighted averages of states and controls. The
//! crate computes the optimal distributed gains for finite and infinite
//! horizons, decides stabilizability of the constrained ensemble, simulates
//! the closed loop, and independently cross-checks optimality through a
//! dense KKT solve and a maximum-principle residual audit.
//!
//! Module map:
//!
//! - [`model`] — problem data ([`Ensemble`], [`ConstraintPolicy`],
//!   [`InitialCondition`]) and validation.
//! - [`riccati`] — finite-horizon backward synthesis ([`GainSchedule`]).
//! - [`are`] — infinite-horizon coupled algebraic Riccati equations,
//!   stabilizing gains and the three equivalent stabilization tests.
//! - [`sim`] — closed-loop simulation and cost accounting.
//! - [`verify`] — the centralized KKT oracle, costate reconstruction and
//!   maximum-principle residuals, randomized campaigns.
//! - [`config`] / [`cli`] — the TOML run-configuration format and the
//!   command implementations behind the `coordlqr` binary.
//!
//! With the default `parallel` feature, randomized verification campaigns
//! and per-subsystem simulation updates fan out over rayon. Disabling the
//! feature selects sequential fallbacks that produce bit-identical results.

pub mod are;
pub mod cli;
pub mod config;
pub mod model;
pub mod riccati;
pub mod sim;
pub mod verify;

mod exec;
mod numeric;

pub use are::{StabilityReport, SteadySolution, Verdict};
pub use model::{ConstraintPolicy, Ensemble, InitialCondition};
pub use riccati::GainSchedule;
pub use sim::Trajectory;

/// Numerical tolerances shared across the solvers and checkers.
///
/// All fields have the defaults the library was validated with; override
/// individual fields through struct update syntax or the `[tolerances]`
/// section of a run configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Relative tolerance for semidefiniteness tests: a symmetric matrix
    /// passes when its smallest eigenvalue is `>= -tol_psd * (1 + max |λ|)`.
    pub tol_psd: f64,
    /// Relative tolerance for algebraic identities between two computed
    /// quantities (dual Riccati forms, the Lyapunov cross-check, ...).
    pub tol_alg: f64,
    /// Relative fixed-point tolerance for the ARE value iteration and the
    /// steady coordination equation.
    pub tol_are: f64,
    /// Iteration cap for the ARE value iteration.
    pub max_are_iter: usize,
    /// Rank decisions keep singular values above `tol_rank * σ_max`.
    pub tol_rank: f64,
    /// Required eigenvalue accuracy for spectral-radius tests; the Schur
    /// iteration behind them converges to machine precision, well inside
    /// this bound.
    pub tol_eig: f64,
    /// Relative residual bound for the assembled KKT system.
    pub tol_kkt: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tol_psd: 1e-9,
            tol_alg: 1e-9,
            tol_are: 1e-10,
            max_are_iter: 10_000,
            tol_rank: 1e-10,
            tol_eig: 1e-10,
            tol_kkt: 1e-8,
        }
    }
}
