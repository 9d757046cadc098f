//! Independent verification of the synthesized controllers.
//!
//! Two routes that never touch the backward recursions:
//!
//! - a centralized oracle that eliminates states, assembles the
//!   finite-horizon problem as an equality-constrained quadratic program and
//!   solves the dense KKT saddle-point system directly;
//! - a maximum-principle checker that reconstructs the costates from their
//!   closed forms and measures the equilibrium and adjoint residuals.
//!
//! Randomized campaigns run many small instances against both routes; with
//! the `parallel` feature instances are checked concurrently, each derived
//! from its own deterministic seed stream.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::are::{gains, solve_are, solve_pbar, spectral_radius, AreError};
use crate::exec;
use crate::model::{weighted_average, ConstraintPolicy, Ensemble, InitialCondition, ModelError};
use crate::numeric;
use crate::riccati::{optimal_cost, riccati_step, synthesize_finite, GainSchedule, RiccatiError};
use crate::sim::{simulate, GainSource, SimError, Trajectory};
use crate::Tolerances;

/// Largest stacked-control dimension `m·v·(N+1)` the dense oracle accepts.
pub const ORACLE_MAX_UNKNOWNS: usize = 2000;

/// Verification failures.
#[derive(Debug, Clone, PartialEq)]
pub enum VerifyError {
    /// The stacked problem exceeds the dense-solve budget.
    ProblemTooLarge { unknowns: usize, limit: usize },
    /// The KKT system could not be solved to the required residual.
    SingularKkt { residual: f64 },
    /// Trajectory, schedule and costate trace cover different horizons.
    HorizonMismatch { expected: usize, got: usize },
    /// Propagated synthesis failure.
    Riccati(RiccatiError),
    /// Propagated simulation failure.
    Sim(SimError),
    /// Propagated data validation failure.
    Model(ModelError),
    /// Propagated infinite-horizon failure.
    Are(AreError),
}

impl fmt::Display for VerifyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyError::ProblemTooLarge { unknowns, limit } => write!(
                f,
                "ProblemTooLarge: {unknowns} stacked controls exceed the dense limit {limit}"
            ),
            VerifyError::SingularKkt { residual } => write!(
                f,
                "SingularKKT: saddle-point solve left relative residual {residual:.3e}"
            ),
            VerifyError::HorizonMismatch { expected, got } => {
                write!(f, "HorizonMismatch: expected horizon {expected}, got {got}")
            }
            VerifyError::Riccati(e) => write!(f, "{e}"),
            VerifyError::Sim(e) => write!(f, "{e}"),
            VerifyError::Model(e) => write!(f, "{e}"),
            VerifyError::Are(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for VerifyError {}

impl From<RiccatiError> for VerifyError {
    fn from(e: RiccatiError) -> Self {
        VerifyError::Riccati(e)
    }
}

impl From<SimError> for VerifyError {
    fn from(e: SimError) -> Self {
        VerifyError::Sim(e)
    }
}

impl From<ModelError> for VerifyError {
    fn from(e: ModelError) -> Self {
        VerifyError::Model(e)
    }
}

impl From<AreError> for VerifyError {
    fn from(e: AreError) -> Self {
        VerifyError::Are(e)
    }
}

/// Minimizer of the stacked equality-constrained program.
///
/// Controls are stored subsystem-major: the block for `u_k^i` starts at
/// `(i·(N+1) + k)·m`. Multipliers hold one `m`-block per constraint step.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    /// All stacked controls, length `m·v·(N+1)`.
    pub controls: DVector<f64>,
    /// Objective value at the minimizer.
    pub cost: f64,
    /// Relative residual of the solved KKT system.
    pub kkt_residual: f64,
    /// Lagrange multipliers of the average constraint, length `m·(N+1)`.
    pub multipliers: DVector<f64>,
    subsystems: usize,
    horizon: usize,
    input_dim: usize,
}

impl OracleSolution {
    /// The control `u_k^i` as an owned vector.
    pub fn control(&self, subsystem: usize, step: usize) -> DVector<f64> {
        assert!(subsystem < self.subsystems && step <= self.horizon);
        let m = self.input_dim;
        let offset = (subsystem * (self.horizon + 1) + step) * m;
        self.controls.rows(offset, m).into_owned()
    }
}

/// Costates reconstructed from their closed forms.
///
/// `p[k][i]` is the subsystem costate at step `k`; `p_extra[k]` is the
/// multiplier of the average constraint. Both run over `k = 0..=N` and the
/// terminal entries `p[N][i]` are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateTrace {
    /// Per-step, per-subsystem costates.
    pub p: Vec<Vec<DVector<f64>>>,
    /// Per-step constraint multiplier.
    pub p_extra: Vec<DVector<f64>>,
}

/// Condensed matrices shared by every subsystem of one instance.
struct Condensed {
    /// Stacked state transition `Φ`: block `k` is `A^k`.
    phi: DMatrix<f64>,
    /// Stacked control-to-state map `Γ`: block `(k, j)` is `A^{k−1−j}B`.
    gamma: DMatrix<f64>,
    /// `Γ'Q̃Γ + R̃`.
    h_sub: DMatrix<f64>,
    /// `Γ'Q̃Φ`.
    cross: DMatrix<f64>,
    /// `Φ'Q̃Φ`.
    constant: DMatrix<f64>,
    /// Block diagonal of the per-step constraint gains.
    fhat: DMatrix<f64>,
}

fn condense(ens: &Ensemble, policy: &ConstraintPolicy, horizon: usize) -> Condensed {
    let (n, m) = (ens.state_dim(), ens.input_dim());
    let blk = horizon + 1;

    let mut powers = Vec::with_capacity(blk);
    powers.push(DMatrix::identity(n, n));
    for k in 1..blk {
        powers.push(&powers[k - 1] * ens.a());
    }

    let mut phi = DMatrix::zeros(blk * n, n);
    for (k, power) in powers.iter().enumerate() {
        phi.view_mut((k * n, 0), (n, n)).copy_from(power);
    }

    let mut gamma = DMatrix::zeros(blk * n, blk * m);
    for k in 1..blk {
        for j in 0..k {
            let block = &powers[k - 1 - j] * ens.b();
            gamma.view_mut((k * n, j * m), (n, m)).copy_from(&block);
        }
    }

    let mut q_tilde = DMatrix::zeros(blk * n, blk * n);
    let mut r_tilde = DMatrix::zeros(blk * m, blk * m);
    let mut fhat = DMatrix::zeros(blk * m, blk * n);
    for k in 0..blk {
        q_tilde.view_mut((k * n, k * n), (n, n)).copy_from(ens.q());
        r_tilde.view_mut((k * m, k * m), (m, m)).copy_from(ens.r());
        let fbar = policy.gain_at(k).expect("policy length checked by callers");
        fhat.view_mut((k * m, k * n), (m, n)).copy_from(fbar);
    }

    let q_gamma = &q_tilde * &gamma;
    let h_sub = gamma.transpose() * &q_gamma + r_tilde;
    let cross = q_gamma.transpose() * &phi;
    let constant = phi.transpose() * &q_tilde * &phi;

    Condensed {
        phi,
        gamma,
        h_sub,
        cross,
        constant,
        fhat,
    }
}

/// Solves the finite-horizon problem directly as an equality-constrained
/// quadratic program.
///
/// States are eliminated through the condensed dynamics, the objective
/// becomes `u'Hu + 2c'u + const` over the stacked controls, and the
/// `(N+1)·m` average-constraint rows close the KKT saddle-point system,
/// which is solved by a dense factorization.
pub fn centralized_oracle(
    ens: &Ensemble,
    policy: &ConstraintPolicy,
    horizon: usize,
    ic: &InitialCondition,
    tols: &Tolerances,
) -> Result<OracleSolution, VerifyError> {
    policy.check(ens, Some(horizon))?;
    let (v, m) = (ens.subsystem_count(), ens.input_dim());
    let blk = horizon + 1;
    let unknowns = v * blk * m;
    if unknowns > ORACLE_MAX_UNKNOWNS {
        return Err(VerifyError::ProblemTooLarge {
            unknowns,
            limit: ORACLE_MAX_UNKNOWNS,
        });
    }

    let parts = condense(ens, policy, horizon);
    let nc = blk * m;

    // Objective blocks: H = diag(H_sub, …), c_i = Γ'Q̃Φ ξ^i.
    let mut hessian = DMatrix::zeros(unknowns, unknowns);
    let mut linear = DVector::zeros(unknowns);
    let mut constant = 0.0;
    for (i, x0) in ic.states().iter().enumerate() {
        hessian
            .view_mut((i * nc, i * nc), (nc, nc))
            .copy_from(&parts.h_sub);
        linear.rows_mut(i * nc, nc).copy_from(&(&parts.cross * x0));
        constant += x0.dot(&(&parts.constant * x0));
    }

    // Constraint rows: Σ_i μ_i (I − F̂Γ) u^i = F̂Φ ξ̄.
    let g_sub = DMatrix::identity(nc, nc) - &parts.fhat * &parts.gamma;
    let mut constraints = DMatrix::zeros(nc, unknowns);
    for i in 0..v {
        constraints
            .view_mut((0, i * nc), (nc, nc))
            .copy_from(&(&g_sub * ens.mu()[i]));
    }
    let avg0 = weighted_average(ic.states(), ens.mu())?;
    let rhs_constraint = &parts.fhat * &parts.phi * avg0;

    // KKT saddle-point system.
    let dim = unknowns + nc;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (unknowns, unknowns))
        .copy_from(&(&hessian * 2.0));
    kkt.view_mut((0, unknowns), (unknowns, nc))
        .copy_from(&constraints.transpose());
    kkt.view_mut((unknowns, 0), (nc, unknowns))
        .copy_from(&constraints);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, unknowns).copy_from(&(-&linear * 2.0));
    rhs.rows_mut(unknowns, nc).copy_from(&rhs_constraint);

    let kkt_norm = kkt.norm();
    let residual_of = |z: &Option<DVector<f64>>| match z {
        Some(z) => (&kkt * z - &rhs).norm() / (kkt_norm * (1.0 + z.norm())),
        None => f64::INFINITY,
    };

    let mut solution = kkt.clone().lu().solve(&rhs);
    let mut residual = residual_of(&solution);
    if residual > tols.tol_kkt {
        solution = kkt.clone().full_piv_lu().solve(&rhs);
        residual = residual_of(&solution);
    }
    let solution = match solution {
        Some(z) if residual <= tols.tol_kkt => z,
        _ => return Err(VerifyError::SingularKkt { residual }),
    };

    let controls = solution.rows(0, unknowns).into_owned();
    let multipliers = solution.rows(unknowns, nc).into_owned();
    let cost = controls.dot(&(&hessian * &controls)) + 2.0 * linear.dot(&controls) + constant;

    Ok(OracleSolution {
        controls,
        cost,
        kkt_residual: residual,
        multipliers,
        subsystems: v,
        horizon,
        input_dim: m,
    })
}

/// The unconstrained variant (constraint rows removed): the stacked
/// standard LQ optimum. Returns the minimizer and its cost.
pub fn unconstrained_oracle(
    ens: &Ensemble,
    horizon: usize,
    ic: &InitialCondition,
) -> Result<(DVector<f64>, f64), VerifyError> {
    let (v, m) = (ens.subsystem_count(), ens.input_dim());
    let blk = horizon + 1;
    let unknowns = v * blk * m;
    if unknowns > ORACLE_MAX_UNKNOWNS {
        return Err(VerifyError::ProblemTooLarge {
            unknowns,
            limit: ORACLE_MAX_UNKNOWNS,
        });
    }
    // Any policy works here: only the objective blocks are used.
    let placeholder = ConstraintPolicy::Steady(DMatrix::zeros(m, ens.state_dim()));
    let parts = condense(ens, &placeholder, horizon);
    let nc = blk * m;
    let factor = nalgebra::Cholesky::new(parts.h_sub.clone()).ok_or(VerifyError::SingularKkt {
        residual: f64::INFINITY,
    })?;

    let mut controls = DVector::zeros(unknowns);
    let mut cost = 0.0;
    for (i, x0) in ic.states().iter().enumerate() {
        let c_i = &parts.cross * x0;
        let u_i = factor.solve(&(-&c_i));
        cost +=
            u_i.dot(&(&parts.h_sub * &u_i)) + 2.0 * c_i.dot(&u_i) + x0.dot(&(&parts.constant * x0));
        controls.rows_mut(i * nc, nc).copy_from(&u_i);
    }
    Ok((controls, cost))
}

/// Evaluates the closed-form costates along a trajectory produced by the
/// given schedule:
///
/// ```text
/// p_k^i     = P_{k+1} x_{k+1}^i + (μ_i/Σμ²) P̄_{k+1} x̄_{k+1}
/// p_k^{v+1} = −(1/Σμ²) [(R + B'(P+P̄)_{k+1}B) F̄_k + B'(P+P̄)_{k+1}A] x̄_k
/// ```
///
/// The trajectory must hold exactly `N+1` control applications.
pub fn costates_closed_form(
    traj: &Trajectory,
    schedule: &GainSchedule,
    ens: &Ensemble,
) -> Result<CostateTrace, VerifyError> {
    let horizon = schedule.horizon();
    if traj.steps() != horizon + 1 {
        return Err(VerifyError::HorizonMismatch {
            expected: horizon + 1,
            got: traj.steps(),
        });
    }
    let scale = ens.mu_norm_sq();
    let (a, b, r) = (ens.a(), ens.b(), ens.r());

    let mut p = Vec::with_capacity(horizon + 1);
    let mut p_extra = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let value_next = &schedule.p()[k + 1];
        let coord_next = &schedule.p_bar()[k + 1];
        let avg_next = &traj.avg_state[k + 1];
        let row: Vec<DVector<f64>> = traj.states[k + 1]
            .iter()
            .enumerate()
            .map(|(i, x_next)| value_next * x_next + coord_next * avg_next * (ens.mu()[i] / scale))
            .collect();
        p.push(row);

        let fbar = &schedule.k()[k] + &schedule.k_bar()[k];
        let total_next = value_next + coord_next;
        let operator =
            (r + b.transpose() * &total_next * b) * fbar + b.transpose() * &total_next * a;
        p_extra.push(operator * &traj.avg_state[k] * (-1.0 / scale));
    }

    Ok(CostateTrace { p, p_extra })
}

/// Maximum-principle residuals over a trajectory/costate pair.
///
/// Returns the maxima over all subsystems and steps of the equilibrium
/// residual `‖R u_k^i + B'p_k^i + μ_i p_k^{v+1}‖` (steps `0..=N`) and the
/// adjoint residual `‖p_{k−1}^i − Q x_k^i − A'p_k^i + μ_i F̄_k'p_k^{v+1}‖`
/// (steps `1..=N`).
pub fn mp_residuals(
    traj: &Trajectory,
    trace: &CostateTrace,
    ens: &Ensemble,
    policy: &ConstraintPolicy,
) -> Result<(f64, f64), VerifyError> {
    let horizon = trace
        .p
        .len()
        .checked_sub(1)
        .ok_or(VerifyError::HorizonMismatch {
            expected: 1,
            got: 0,
        })?;
    if traj.steps() != horizon + 1 {
        return Err(VerifyError::HorizonMismatch {
            expected: horizon + 1,
            got: traj.steps(),
        });
    }
    policy.check(ens, None)?;
    if policy.gain_at(horizon).is_none() {
        return Err(VerifyError::HorizonMismatch {
            expected: horizon + 1,
            got: 0,
        });
    }
    let (a, b, q, r) = (ens.a(), ens.b(), ens.q(), ens.r());

    let mut equilibrium_max = 0.0f64;
    for k in 0..=horizon {
        for i in 0..ens.subsystem_count() {
            let residual = r * &traj.controls[k][i]
                + b.transpose() * &trace.p[k][i]
                + &trace.p_extra[k] * ens.mu()[i];
            equilibrium_max = equilibrium_max.max(residual.norm());
        }
    }

    let mut adjoint_max = 0.0f64;
    for k in 1..=horizon {
        let fbar = policy.gain_at(k).expect("checked above");
        for i in 0..ens.subsystem_count() {
            let residual =
                &trace.p[k - 1][i] - q * &traj.states[k][i] - a.transpose() * &trace.p[k][i]
                    + fbar.transpose() * &trace.p_extra[k] * ens.mu()[i];
            adjoint_max = adjoint_max.max(residual.norm());
        }
    }

    Ok((equilibrium_max, adjoint_max))
}

/// Size caps for randomized instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceLimits {
    /// Largest state dimension `n`.
    pub max_state_dim: usize,
    /// Largest input dimension `m`.
    pub max_input_dim: usize,
    /// Largest subsystem count `v`.
    pub max_subsystems: usize,
    /// Largest horizon `N`.
    pub max_horizon: usize,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        InstanceLimits {
            max_state_dim: 3,
            max_input_dim: 3,
            max_subsystems: 4,
            max_horizon: 8,
        }
    }
}

/// One randomized finite-horizon problem.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    /// Validated problem data.
    pub ensemble: Ensemble,
    /// Per-step random constraint gains.
    pub policy: ConstraintPolicy,
    /// Horizon `N`.
    pub horizon: usize,
    /// Random initial states.
    pub initial: InitialCondition,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_ensemble(rng: &mut ChaCha8Rng, limits: &InstanceLimits) -> Ensemble {
    let n = rng.random_range(1..=limits.max_state_dim);
    let m = rng.random_range(1..=limits.max_input_dim);
    let v = rng.random_range(1..=limits.max_subsystems);

    let a = random_matrix(rng, n, n);
    let b = random_matrix(rng, n, m);
    let g = random_matrix(rng, n, n);
    let q = &g * g.transpose();
    let h = random_matrix(rng, m, m);
    let r = &h * h.transpose() + DMatrix::identity(m, m);
    let mu = loop {
        let candidate = DVector::from_fn(v, |_, _| rng.random_range(-1.0..1.0));
        if candidate.iter().map(|w| w * w).sum::<f64>() >= 0.05 {
            break candidate;
        }
    };
    Ensemble::new(a, b, q, r, mu).expect("generated data satisfies the invariants")
}

fn random_initial(rng: &mut ChaCha8Rng, ens: &Ensemble) -> InitialCondition {
    let states = (0..ens.subsystem_count())
        .map(|_| DVector::from_fn(ens.state_dim(), |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    InitialCondition::new(states, ens).expect("dimensions match by construction")
}

/// Draws a finite-horizon instance: `Q = G'G`, `R = H'H + I`, entries
/// uniform in `[−1, 1]`, weights redrawn until `Σμ² ≥ 0.05`, one random
/// constraint gain per step.
pub fn random_instance(rng: &mut ChaCha8Rng, limits: &InstanceLimits) -> RandomInstance {
    let ensemble = random_ensemble(rng, limits);
    let horizon = rng.random_range(1..=limits.max_horizon);
    let gains = (0..=horizon)
        .map(|_| random_matrix(rng, ensemble.input_dim(), ensemble.state_dim()))
        .collect();
    let initial = random_initial(rng, &ensemble);
    RandomInstance {
        policy: ConstraintPolicy::Schedule(gains),
        horizon,
        initial,
        ensemble,
    }
}

/// Draws an observable ensemble with one steady constraint gain, rejecting
/// gains within 0.1 of the marginal radius so stabilizable and divergent
/// draws stay well separated.
pub fn random_steady_ensemble(
    rng: &mut ChaCha8Rng,
    limits: &InstanceLimits,
) -> (Ensemble, DMatrix<f64>, InitialCondition) {
    loop {
        let ens = random_ensemble(rng, limits);
        let fbar = loop {
            let candidate = random_matrix(rng, ens.input_dim(), ens.state_dim());
            let rho = spectral_radius(&(ens.a() + ens.b() * &candidate));
            if (rho - 1.0).abs() > 0.1 {
                break candidate;
            }
        };
        let c = match crate::are::sqrt_factor(ens.q()) {
            Ok(c) => c,
            Err(_) => continue,
        };
        if !crate::are::observability(ens.a(), &c, Tolerances::default().tol_rank) {
            continue;
        }
        let ic = random_initial(rng, &ens);
        return (ens, fbar, ic);
    }
}

/// Draws an observable ensemble whose steady gain keeps the average loop
/// strictly contractive (`ρ(A+BF̄) ≤ 0.95`).
pub fn random_stabilizable_ensemble(
    rng: &mut ChaCha8Rng,
    limits: &InstanceLimits,
) -> (Ensemble, DMatrix<f64>, InitialCondition) {
    loop {
        let ens = random_ensemble(rng, limits);
        let c = match crate::are::sqrt_factor(ens.q()) {
            Ok(c) => c,
            Err(_) => continue,
        };
        if !crate::are::observability(ens.a(), &c, Tolerances::default().tol_rank) {
            continue;
        }
        let ic = random_initial(rng, &ens);

        for _ in 0..40 {
            let candidate = random_matrix(rng, ens.input_dim(), ens.state_dim());
            if spectral_radius(&(ens.a() + ens.b() * &candidate)) <= 0.9 {
                return (ens, candidate, ic);
            }
        }
        // Fall back to a perturbation of the optimal local gain, which is
        // contractive whenever the value iteration converges.
        if let Ok(fixed) = solve_are(&ens, 1e-10, 10_000) {
            let (_, optimal_gain) = riccati_step(&fixed.p, &ens).expect("valid fixed point");
            let mut amplitude = 0.5;
            for _ in 0..30 {
                let candidate = &optimal_gain
                    + random_matrix(rng, ens.input_dim(), ens.state_dim()) * amplitude;
                if spectral_radius(&(ens.a() + ens.b() * &candidate)) <= 0.95 {
                    return (ens, candidate, ic);
                }
                amplitude *= 0.5;
            }
        }
    }
}

/// Gap measurements of one instance: closed-form synthesis vs. the oracle
/// plus the maximum-principle residuals at the synthesized optimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleComparison {
    /// `|J_distributed − J_oracle| / (1 + J_oracle)`.
    pub cost_gap: f64,
    /// Largest per-step control deviation (Euclidean norm).
    pub control_gap: f64,
    /// Relative residual the oracle's KKT solve left behind.
    pub kkt_residual: f64,
    /// Largest equilibrium-equation residual.
    pub equilibrium_residual: f64,
    /// Largest adjoint-equation residual.
    pub adjoint_residual: f64,
}

/// Runs synthesis, simulation, the oracle and the maximum-principle checker
/// on one instance and reports every gap.
pub fn compare_instance(
    inst: &RandomInstance,
    tols: &Tolerances,
) -> Result<OracleComparison, VerifyError> {
    let ens = &inst.ensemble;
    let schedule = synthesize_finite(ens, &inst.policy, inst.horizon)?;
    let traj = simulate(
        ens,
        &schedule,
        &inst.policy,
        &inst.initial,
        inst.horizon + 1,
    )?;
    let j_distributed = optimal_cost(&schedule, &inst.initial, ens)?;
    let oracle = centralized_oracle(ens, &inst.policy, inst.horizon, &inst.initial, tols)?;

    let cost_gap = (j_distributed - oracle.cost).abs() / (1.0 + oracle.cost);
    let mut control_gap = 0.0f64;
    for k in 0..=inst.horizon {
        for i in 0..ens.subsystem_count() {
            let gap = (&traj.controls[k][i] - oracle.control(i, k)).norm();
            control_gap = control_gap.max(gap);
        }
    }

    let trace = costates_closed_form(&traj, &schedule, ens)?;
    let (equilibrium_residual, adjoint_residual) = mp_residuals(&traj, &trace, ens, &inst.policy)?;

    Ok(OracleComparison {
        cost_gap,
        control_gap,
        kkt_residual: oracle.kkt_residual,
        equilibrium_residual,
        adjoint_residual,
    })
}

/// Derives the deterministic generator for campaign instance `index`.
pub fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // Splitmix-style mixing keeps per-instance streams independent of the
    // iteration order, so parallel campaigns stay reproducible.
    let mixed =
        (seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(index as u64);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Checks `count` random instances against the oracle, one seed stream per
/// instance. Instances run concurrently under the `parallel` feature.
pub fn oracle_campaign(
    count: usize,
    seed: u64,
    limits: &InstanceLimits,
    tols: &Tolerances,
) -> Result<Vec<OracleComparison>, VerifyError> {
    exec::map_indexed(count, |index| {
        let mut rng = instance_rng(seed, index);
        compare_instance(&random_instance(&mut rng, limits), tols)
    })
    .into_iter()
    .collect()
}

/// The three stabilization verdicts evaluated on one steady instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditOutcome {
    /// `ρ(A+BF̄)`.
    pub spectral_radius: f64,
    /// Verdict by the spectral-radius test.
    pub by_spectral_radius: bool,
    /// Verdict by convergence of the coupled equations with `P ≻ 0` and
    /// `P+P̄ ≻ 0`.
    pub by_are: bool,
    /// Verdict by simulated closed-loop decay.
    pub by_decay: bool,
}

impl AuditOutcome {
    /// All three routes agree.
    pub fn consistent(&self) -> bool {
        self.by_spectral_radius == self.by_are && self.by_are == self.by_decay
    }
}

/// Audits the equivalence of the three stabilization tests on `count`
/// observable random instances.
///
/// The decay verdict simulates the designed distributed law when the
/// coupled equations solve, and the naive law `u_k^i = F̄ x_k^i` otherwise;
/// either way a decayed run certifies stabilizability by exhibiting a
/// stabilizing linear distributed controller.
pub fn stabilization_audit(
    count: usize,
    seed: u64,
    limits: &InstanceLimits,
    tols: &Tolerances,
) -> Vec<AuditOutcome> {
    exec::map_indexed(count, |index| {
        let mut rng = instance_rng(seed, index);
        let (ens, fbar, ic) = random_steady_ensemble(&mut rng, limits);
        audit_one(&ens, &fbar, &ic, tols)
    })
}

fn audit_one(
    ens: &Ensemble,
    fbar: &DMatrix<f64>,
    ic: &InitialCondition,
    tols: &Tolerances,
) -> AuditOutcome {
    let rho = spectral_radius(&(ens.a() + ens.b() * fbar));
    let by_spectral_radius = rho < 1.0;

    let mut steady = None;
    let by_are = match solve_are(ens, tols.tol_are, tols.max_are_iter) {
        Ok(fixed) => match solve_pbar(&fixed.p, fbar, ens, tols.tol_are) {
            Ok(p_bar) => {
                let p_pd = numeric::is_pd(&fixed.p, 1e-9);
                let total_pd = numeric::is_pd(&(&fixed.p + &p_bar), 1e-9);
                if let Ok(pair) = gains(&fixed.p, fbar, ens) {
                    steady = Some(pair);
                }
                p_pd && total_pd
            }
            Err(_) => false,
        },
        Err(_) => false,
    };

    let zero_coupling = DMatrix::zeros(ens.input_dim(), ens.state_dim());
    let (feedback, coupling) = match &steady {
        Some((k, k_bar)) => (k.clone(), k_bar.clone()),
        None => (fbar.clone(), zero_coupling),
    };
    let rho_local = spectral_radius(&(ens.a() + ens.b() * &feedback));
    let rho_hat = rho.max(rho_local);
    let steps = if rho_hat < 1.0 {
        ((1e-9f64.ln() / rho_hat.ln()).ceil() as usize).clamp(50, 30_000)
    } else {
        200
    };

    let policy = ConstraintPolicy::Steady(fbar.clone());
    let gains = GainSource::Steady {
        feedback: &feedback,
        coupling: &coupling,
    };
    let by_decay = match simulate(ens, gains, &policy, ic, steps) {
        Ok(traj) => {
            let start = ic.states().iter().map(|x| x.norm()).fold(0.0, f64::max);
            let end = traj.final_max_state_norm();
            end.is_finite() && end <= 1e-6 * (1.0 + start)
        }
        Err(_) => false,
    };

    AuditOutcome {
        spectral_radius: rho,
        by_spectral_radius,
        by_are,
        by_decay,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn reference_ensemble() -> Ensemble {
        Ensemble::new(
            scalar(2.0),
            scalar(1.0),
            scalar(1.0),
            scalar(1.0),
            DVector::from_vec(vec![0.3, 0.2, 0.3, 0.1, 0.4]),
        )
        .unwrap()
    }

    fn reference_ic(ens: &Ensemble) -> InitialCondition {
        InitialCondition::new(
            [3.0, 2.0, 1.0, 4.0, 5.0]
                .iter()
                .map(|&x| DVector::from_vec(vec![x]))
                .collect(),
            ens,
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_oracle_reproduces_standard_lq_cost() {
        let ens = reference_ensemble();
        let ic = reference_ic(&ens);
        let horizon = 9;
        let (_, cost) = unconstrained_oracle(&ens, horizon, &ic).unwrap();
        let policy = ConstraintPolicy::Steady(scalar(0.0));
        let schedule = synthesize_finite(&ens, &policy, horizon).unwrap();
        let head = &schedule.p()[0];
        let expected: f64 = ic.states().iter().map(|x| x.dot(&(head * x))).sum();
        assert!((cost - expected).abs() / (1.0 + expected) <= 1e-10);
    }

    #[test]
    fn oracle_matches_closed_form_cost_on_reference_instance() {
        let ens = reference_ensemble();
        let ic = reference_ic(&ens);
        let policy = ConstraintPolicy::Steady(scalar(-1.5));
        let horizon = 10;
        let schedule = synthesize_finite(&ens, &policy, horizon).unwrap();
        let expected = optimal_cost(&schedule, &ic, &ens).unwrap();
        let oracle =
            centralized_oracle(&ens, &policy, horizon, &ic, &Tolerances::default()).unwrap();
        assert!((oracle.cost - expected).abs() / (1.0 + oracle.cost) <= 1e-8);
        assert!(oracle.kkt_residual <= 1e-8);
    }

    #[test]
    fn degenerate_constraint_gives_unconstrained_controls() {
        // v = 1 with F̄_k = K_k: the constraint reproduces the local law.
        let ens = Ensemble::new(
            scalar(2.0),
            scalar(1.0),
            scalar(1.0),
            scalar(1.0),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let ic = InitialCondition::new(vec![DVector::from_vec(vec![1.5])], &ens).unwrap();
        let horizon = 6;
        let seed_policy = ConstraintPolicy::Steady(scalar(0.0));
        let schedule = synthesize_finite(&ens, &seed_policy, horizon).unwrap();
        let policy = ConstraintPolicy::Schedule(schedule.k().to_vec());
        let schedule = synthesize_finite(&ens, &policy, horizon).unwrap();
        let traj = simulate(&ens, &schedule, &policy, &ic, horizon + 1).unwrap();
        let oracle =
            centralized_oracle(&ens, &policy, horizon, &ic, &Tolerances::default()).unwrap();
        for k in 0..=horizon {
            let expected = &schedule.k()[k] * &traj.states[k][0];
            assert_abs_diff_eq!(
                (oracle.control(0, k) - expected).norm(),
                0.0,
                epsilon = 1e-10
            );
        }
        assert!(oracle.multipliers.norm() <= 1e-9);
    }

    #[test]
    fn oversized_problems_are_rejected() {
        let ens = reference_ensemble();
        let ic = reference_ic(&ens);
        let policy = ConstraintPolicy::Steady(scalar(-1.5));
        let err = centralized_oracle(&ens, &policy, 500, &ic, &Tolerances::default()).unwrap_err();
        assert!(matches!(err, VerifyError::ProblemTooLarge { .. }));
    }

    #[test]
    fn terminal_costates_match_their_closed_forms() {
        let ens = reference_ensemble();
        let ic = reference_ic(&ens);
        let policy = ConstraintPolicy::Steady(scalar(-1.5));
        let horizon = 7;
        let schedule = synthesize_finite(&ens, &policy, horizon).unwrap();
        let traj = simulate(&ens, &schedule, &policy, &ic, horizon + 1).unwrap();
        let trace = costates_closed_form(&traj, &schedule, &ens).unwrap();

        for p in &trace.p[horizon] {
            assert_eq!(p.norm(), 0.0);
        }
        // p_N^{v+1} = −(1/Σμ²) R F̄_N x̄_N.
        let expected =
            ens.r() * scalar(-1.5) * &traj.avg_state[horizon] * (-1.0 / ens.mu_norm_sq());
        assert_abs_diff_eq!(
            (&trace.p_extra[horizon] - expected).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn residuals_vanish_at_the_synthesized_optimum() {
        let ens = reference_ensemble();
        let ic = reference_ic(&ens);
        let policy = ConstraintPolicy::Steady(scalar(-1.5));
        let horizon = 12;
        let schedule = synthesize_finite(&ens, &policy, horizon).unwrap();
        let traj = simulate(&ens, &schedule, &policy, &ic, horizon + 1).unwrap();
        let trace = costates_closed_form(&traj, &schedule, &ens).unwrap();
        let (eq, adj) = mp_residuals(&traj, &trace, &ens, &policy).unwrap();
        assert!(eq <= 1e-10, "equilibrium residual {eq}");
        assert!(adj <= 1e-10, "adjoint residual {adj}");
    }

    #[test]
    fn perturbed_control_is_flagged_by_equilibrium_residual() {
        let ens = reference_ensemble();
        let ic = reference_ic(&ens);
        let policy = ConstraintPolicy::Steady(scalar(-1.5));
        let horizon = 5;
        let schedule = synthesize_finite(&ens, &policy, horizon).unwrap();
        let mut traj = simulate(&ens, &schedule, &policy, &ic, horizon + 1).unwrap();
        let trace = costates_closed_form(&traj, &schedule, &ens).unwrap();

        // Bump the final-step control of one subsystem: the step-N costates
        // depend only on x̄_N, so the equilibrium residual grows by R·δ.
        let delta = 1e-3;
        traj.controls[horizon][2][0] += delta;
        let (eq, _) = mp_residuals(&traj, &trace, &ens, &policy).unwrap();
        assert!(eq >= ens.r().norm() * delta / 2.0);
    }

    #[test]
    fn zero_system_adjoint_reduces_to_state_weight() {
        let ens = Ensemble::new(
            scalar(0.0),
            scalar(0.0),
            scalar(3.0),
            scalar(1.0),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        let ic = InitialCondition::new(
            vec![DVector::from_vec(vec![2.0]), DVector::from_vec(vec![-1.0])],
            &ens,
        )
        .unwrap();
        let policy = ConstraintPolicy::Steady(scalar(0.0));
        let horizon = 3;
        let schedule = synthesize_finite(&ens, &policy, horizon).unwrap();
        let traj = simulate(&ens, &schedule, &policy, &ic, horizon + 1).unwrap();
        let trace = costates_closed_form(&traj, &schedule, &ens).unwrap();
        // With A = B = 0 and zero controls: p_{k−1}^i = Q x_k^i, and all
        // states vanish from step 1 on.
        let (eq, adj) = mp_residuals(&traj, &trace, &ens, &policy).unwrap();
        assert_eq!(eq, 0.0);
        assert_eq!(adj, 0.0);
        for k in 1..=horizon {
            for i in 0..2 {
                let expected = ens.q() * &traj.states[k][i];
                assert_eq!(&trace.p[k - 1][i], &expected);
            }
        }
    }

    #[test]
    fn campaign_passes_at_documented_tolerances() {
        let comparisons =
            oracle_campaign(50, 42, &InstanceLimits::default(), &Tolerances::default()).unwrap();
        assert_eq!(comparisons.len(), 50);
        for (i, c) in comparisons.iter().enumerate() {
            assert!(
                c.cost_gap <= 1e-7,
                "instance {i}: cost gap {:.3e}",
                c.cost_gap
            );
            assert!(
                c.control_gap <= 1e-6,
                "instance {i}: control gap {:.3e}",
                c.control_gap
            );
            assert!(
                c.equilibrium_residual <= 1e-8,
                "instance {i}: equilibrium residual {:.3e}",
                c.equilibrium_residual
            );
            assert!(
                c.adjoint_residual <= 1e-8,
                "instance {i}: adjoint residual {:.3e}",
                c.adjoint_residual
            );
        }
    }

    #[test]
    fn oracle_cost_dominates_unconstrained_optimum() {
        for index in 0..20 {
            let mut rng = instance_rng(7, index);
            let inst = random_instance(&mut rng, &InstanceLimits::default());
            let oracle = centralized_oracle(
                &inst.ensemble,
                &inst.policy,
                inst.horizon,
                &inst.initial,
                &Tolerances::default(),
            )
            .unwrap();
            let (_, unconstrained) =
                unconstrained_oracle(&inst.ensemble, inst.horizon, &inst.initial).unwrap();
            assert!(oracle.cost >= unconstrained - 1e-9 * (1.0 + unconstrained.abs()));
        }
    }

    #[test]
    fn stabilization_tests_agree_on_random_instances() {
        let outcomes =
            stabilization_audit(50, 42, &InstanceLimits::default(), &Tolerances::default());
        assert_eq!(outcomes.len(), 50);
        let stabilizable = outcomes.iter().filter(|o| o.by_spectral_radius).count();
        assert!(
            stabilizable > 0,
            "audit draws contain no stabilizable instances"
        );
        assert!(
            stabilizable < 50,
            "audit draws contain no divergent instances"
        );
        for (i, o) in outcomes.iter().enumerate() {
            assert!(
                o.consistent(),
                "instance {i}: ρ={} verdicts ρ<1:{} ARE:{} decay:{}",
                o.spectral_radius,
                o.by_spectral_radius,
                o.by_are,
                o.by_decay
            );
        }
    }
}
