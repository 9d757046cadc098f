//! Finite-horizon backward synthesis.
//!
//! Running the two coupled backward recursions from the zero terminal pair
//! produces the cost-to-go matrices `P_k`, the coordination matrices `P̄_k`
//! pricing the average constraint, and the distributed gains
//! `u_k^i = K_k x_k^i + (μ_i / Σμ²) K̄_k x̄_k`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::model::{weighted_average, ConstraintPolicy, Ensemble, InitialCondition, ModelError};
use crate::numeric;

/// Failures of the backward synthesis.
#[derive(Debug, Clone, PartialEq)]
pub enum RiccatiError {
    /// `R + B'P B` failed its positive-definite factorization. Cannot occur
    /// for validated problem data with PSD `P`; indicates corrupt inputs.
    InnerMatrixSingular,
    /// Invalid policy or initial data.
    Model(ModelError),
}

impl fmt::Display for RiccatiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiccatiError::InnerMatrixSingular => {
                write!(f, "InnerMatrixSingular: R + B'PB is not positive definite")
            }
            RiccatiError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for RiccatiError {}

impl From<ModelError> for RiccatiError {
    fn from(e: ModelError) -> Self {
        RiccatiError::Model(e)
    }
}

/// Time-indexed output of [`synthesize_finite`].
///
/// `p` and `p_bar` run over `k = 0..=N+1` with the zero terminal pair at
/// `N+1`; the gains run over `k = 0..=N`. `k_bar[k] = F̄_k − k[k]` holds by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    horizon: usize,
    p: Vec<DMatrix<f64>>,
    p_bar: Vec<DMatrix<f64>>,
    k: Vec<DMatrix<f64>>,
    k_bar: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    /// Horizon `N`: gains exist for steps `0..=N`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Cost-to-go matrices `P_0..P_{N+1}`.
    pub fn p(&self) -> &[DMatrix<f64>] {
        &self.p
    }

    /// Coordination matrices `P̄_0..P̄_{N+1}`.
    pub fn p_bar(&self) -> &[DMatrix<f64>] {
        &self.p_bar
    }

    /// Local feedback gains `K_0..K_N`.
    pub fn k(&self) -> &[DMatrix<f64>] {
        &self.k
    }

    /// Average-coupling gains `K̄_0..K̄_N`.
    pub fn k_bar(&self) -> &[DMatrix<f64>] {
        &self.k_bar
    }
}

/// One backward step of the Riccati difference equation.
///
/// Returns `P = Q + A'P⁺A − A'P⁺B (R + B'P⁺B)⁻¹ B'P⁺A` (symmetrized) and
/// the gain `K = −(R + B'P⁺B)⁻¹ B'P⁺A`, where `P⁺` is the next-step matrix.
/// The inner solve goes through a Cholesky factorization of `R + B'P⁺B`.
pub fn riccati_step(
    p_next: &DMatrix<f64>,
    ens: &Ensemble,
) -> Result<(DMatrix<f64>, DMatrix<f64>), RiccatiError> {
    let (a, b) = (ens.a(), ens.b());
    let (_, factor) = inner_gram(p_next, ens)?;
    let bpa = b.transpose() * p_next * a;
    let gain = -factor.solve(&bpa);
    let p = ens.q() + a.transpose() * p_next * a + bpa.transpose() * &gain;
    Ok((numeric::symmetrize(&p), gain))
}

/// One backward step of the coordination recursion.
///
/// `P̄ = (A+BF̄)'P̄⁺(A+BF̄) + F̄'(R+B'P⁺B)F̄ + A'P⁺B(R+B'P⁺B)⁻¹B'P⁺A
///      + A'P⁺B F̄ + F̄'B'P⁺A`, symmetrized.
pub fn pbar_step(
    pbar_next: &DMatrix<f64>,
    p_next: &DMatrix<f64>,
    fbar: &DMatrix<f64>,
    ens: &Ensemble,
) -> Result<DMatrix<f64>, RiccatiError> {
    let (a, b) = (ens.a(), ens.b());
    let (gram, factor) = inner_gram(p_next, ens)?;
    let closed = a + b * fbar;
    let bpa = b.transpose() * p_next * a;
    let schur_term = bpa.transpose() * factor.solve(&bpa);
    let cross = bpa.transpose() * fbar;
    let pbar = closed.transpose() * pbar_next * &closed
        + fbar.transpose() * &gram * fbar
        + schur_term
        + &cross
        + cross.transpose();
    Ok(numeric::symmetrize(&pbar))
}

type SpdFactor = nalgebra::Cholesky<f64, nalgebra::Dyn>;

fn inner_gram(
    p_next: &DMatrix<f64>,
    ens: &Ensemble,
) -> Result<(DMatrix<f64>, SpdFactor), RiccatiError> {
    let b = ens.b();
    let gram = numeric::symmetrize(&(ens.r() + b.transpose() * p_next * b));
    let factor = nalgebra::Cholesky::new(gram.clone()).ok_or(RiccatiError::InnerMatrixSingular)?;
    Ok((gram, factor))
}

/// Runs both recursions backward from the zero terminal pair and fills the
/// gains for steps `0..=N`. A schedule policy must supply `N+1` gains; a
/// steady policy is applied at every step.
pub fn synthesize_finite(
    ens: &Ensemble,
    policy: &ConstraintPolicy,
    horizon: usize,
) -> Result<GainSchedule, RiccatiError> {
    policy.check(ens, Some(horizon))?;
    let n = ens.state_dim();
    let zero = DMatrix::zeros(n, n);

    let mut p = vec![zero.clone(); horizon + 2];
    let mut p_bar = vec![zero; horizon + 2];
    let mut k = vec![DMatrix::zeros(0, 0); horizon + 1];
    let mut k_bar = vec![DMatrix::zeros(0, 0); horizon + 1];

    for step in (0..=horizon).rev() {
        let fbar = policy.gain_at(step).expect("policy length checked above");
        let (p_k, gain) = riccati_step(&p[step + 1], ens)?;
        p_bar[step] = pbar_step(&p_bar[step + 1], &p[step + 1], fbar, ens)?;
        k_bar[step] = fbar - &gain;
        p[step] = p_k;
        k[step] = gain;
    }

    Ok(GainSchedule {
        horizon,
        p,
        p_bar,
        k,
        k_bar,
    })
}

/// The optimal value of the constrained problem from a given start:
/// `Σ_i x_0^i' P_0 x_0^i + (1/Σμ²) x̄_0' P̄_0 x̄_0`.
pub fn optimal_cost(
    schedule: &GainSchedule,
    ic: &InitialCondition,
    ens: &Ensemble,
) -> Result<f64, RiccatiError> {
    let avg = weighted_average(ic.states(), ens.mu())?;
    let local: f64 = ic
        .states()
        .iter()
        .map(|x| quad_form(&schedule.p[0], x))
        .sum();
    Ok(local + quad_form(&schedule.p_bar[0], &avg) / ens.mu_norm_sq())
}

/// The coordination term of [`optimal_cost`] alone:
/// `(1/Σμ²) x̄_0' P̄_0 x̄_0`, the price of meeting the average constraint.
pub fn coordination_cost(
    schedule: &GainSchedule,
    ic: &InitialCondition,
    ens: &Ensemble,
) -> Result<f64, RiccatiError> {
    let avg = weighted_average(ic.states(), ens.mu())?;
    Ok(quad_form(&schedule.p_bar[0], &avg) / ens.mu_norm_sq())
}

fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Value matrices of the naive policy `u_k^i = F̄_k x_k^i`, from the Lyapunov
/// recursion `S_k = Q + F̄_k'RF̄_k + (A+BF̄_k)'S_{k+1}(A+BF̄_k)`, `S_{N+1} = 0`.
///
/// The returned sequence runs over `k = 0..=N+1`; it equals `P_k + P̄_k`
/// from [`synthesize_finite`] for every `k`.
pub fn naive_policy_value(
    ens: &Ensemble,
    policy: &ConstraintPolicy,
    horizon: usize,
) -> Result<Vec<DMatrix<f64>>, RiccatiError> {
    policy.check(ens, Some(horizon))?;
    let n = ens.state_dim();
    let mut s = vec![DMatrix::zeros(n, n); horizon + 2];
    for step in (0..=horizon).rev() {
        let fbar = policy.gain_at(step).expect("policy length checked above");
        let closed = ens.a() + ens.b() * fbar;
        let value = ens.q()
            + fbar.transpose() * ens.r() * fbar
            + closed.transpose() * &s[step + 1] * closed;
        s[step] = numeric::symmetrize(&value);
    }
    Ok(s)
}
