//! Infinite-horizon synthesis and stabilization tests.
//!
//! The steady pair `(P, P̄)` solves the coupled algebraic Riccati equations
//!
//! ```text
//! P  = Q + A'PA − A'PB (R + B'PB)⁻¹ B'PA
//! P̄  = (A+BF̄)'P̄(A+BF̄) + F̄'(R+B'PB)F̄
//!      + A'PB (R + B'PB)⁻¹ B'PA + A'PB F̄ + F̄'B'PA
//! ```
//!
//! Under observability of `(A, C)` with `C'C = Q`, the following are
//! equivalent: the constrained ensemble is stabilizable; `ρ(A+BF̄) < 1`;
//! the coupled equations admit a unique solution with `P+P̄ ⪰ P ≻ 0`.
//! [`stability_report`] evaluates all three routes and cross-checks them.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::model::Ensemble;
use crate::numeric;
use crate::riccati::{pbar_step, riccati_step, RiccatiError};
use crate::Tolerances;

/// Failures of the infinite-horizon solvers.
#[derive(Debug, Clone, PartialEq)]
pub enum AreError {
    /// The value iteration did not reach the fixed-point tolerance; for
    /// validated data this signals a non-stabilizable system.
    NoConvergence { iterations: usize, residual: f64 },
    /// The converged value matrix failed its definiteness check even though
    /// `(A, C)` is observable.
    NotPositiveDefinite { min_eigenvalue: f64 },
    /// `ρ(A+BF̄) ≥ 1`, so the steady coordination equation has no solution.
    ClosedLoopUnstable { spectral_radius: f64 },
    /// Input to [`sqrt_factor`] is not positive semidefinite.
    QNotPsd { min_eigenvalue: f64 },
    /// The linearized coordination equation is singular. Cannot occur when
    /// `ρ(A+BF̄) < 1`; indicates corrupt inputs.
    LyapunovSingular,
    /// The three stabilization tests disagree, which contradicts their
    /// proven equivalence.
    InconsistentVerdict { details: String },
    /// Propagated backward-step failure.
    Riccati(RiccatiError),
}

impl fmt::Display for AreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AreError::NoConvergence {
                iterations,
                residual,
            } => write!(
                f,
                "NoConvergence: fixed point not reached after {iterations} iterations \
                 (residual {residual:.3e})"
            ),
            AreError::NotPositiveDefinite { min_eigenvalue } => write!(
                f,
                "NotPositiveDefinite: converged value matrix has eigenvalue {min_eigenvalue:.3e} \
                 despite observability"
            ),
            AreError::ClosedLoopUnstable { spectral_radius } => write!(
                f,
                "ClosedLoopUnstable: ρ(A+BF̄) = {spectral_radius:.6} is not below 1"
            ),
            AreError::QNotPsd { min_eigenvalue } => write!(
                f,
                "QNotPSD: smallest eigenvalue {min_eigenvalue:.3e} is below tolerance"
            ),
            AreError::LyapunovSingular => {
                write!(
                    f,
                    "LyapunovSingular: linearized coordination equation is singular"
                )
            }
            AreError::InconsistentVerdict { details } => {
                write!(f, "InconsistentVerdict: {details}")
            }
            AreError::Riccati(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AreError {}

impl From<RiccatiError> for AreError {
    fn from(e: RiccatiError) -> Self {
        AreError::Riccati(e)
    }
}

/// Converged value matrix with iteration bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct AreFixedPoint {
    /// The stationary Riccati solution.
    pub p: DMatrix<f64>,
    /// Iterations the value iteration took.
    pub iterations: usize,
    /// Final relative fixed-point residual.
    pub residual: f64,
}

/// Steady-state synthesis output: the ARE pair and the stabilizing gains.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadySolution {
    /// Stationary cost-to-go matrix, positive definite under observability.
    pub p: DMatrix<f64>,
    /// Stationary coordination matrix.
    pub p_bar: DMatrix<f64>,
    /// Local feedback gain `K = −(R+B'PB)⁻¹B'PA`.
    pub k: DMatrix<f64>,
    /// Average-coupling gain `K̄ = F̄ − K`.
    pub k_bar: DMatrix<f64>,
    /// Iterations of the value iteration for `P`.
    pub iterations: usize,
    /// Final fixed-point residuals of both equations.
    pub residuals: SteadyResiduals,
}

/// Relative fixed-point residuals of the steady pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyResiduals {
    /// `‖step(P) − P‖ / (1 + ‖P‖)`.
    pub p: f64,
    /// `‖step(P̄) − P̄‖ / (1 + ‖P̄‖)`.
    pub p_bar: f64,
}

/// Stabilizability verdict for the constrained ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// A distributed law in `(x_k^i, x̄_k)` drives every subsystem to zero.
    Stabilizable,
    /// No such law exists (`ρ(A+BF̄) ≥ 1`, marginal cases included).
    NotStabilizable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Stabilizable => write!(f, "stabilizable"),
            Verdict::NotStabilizable => write!(f, "not_stabilizable"),
        }
    }
}

/// Outcome of the three equivalent stabilization tests.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// `ρ(A+BF̄)`, the primary test.
    pub spectral_radius_closed_loop: f64,
    /// `(A, C)` observability with `C'C = Q`.
    pub observable: bool,
    /// Both coupled equations converged.
    pub are_solved: bool,
    /// `P ≻ 0` (meaningful when `are_solved`).
    pub p_positive_definite: bool,
    /// `P + P̄ ≻ 0` (meaningful when `are_solved`).
    pub p_plus_pbar_positive_definite: bool,
    /// Verdict from the spectral-radius test.
    pub verdict: Verdict,
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Symmetric square root: returns `C` with `C'C = Q` for symmetric PSD `Q`.
///
/// Eigenvalues within the PSD tolerance of zero are clamped to zero; an
/// eigenvalue materially below zero is an error.
pub fn sqrt_factor(q: &DMatrix<f64>) -> Result<DMatrix<f64>, AreError> {
    let sym = numeric::symmetrize(q);
    let eig = sym.symmetric_eigen();
    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, x| acc.max(x.abs()));
    let floor = -1e-9 * (1.0 + max_abs);
    let mut roots = DVector::zeros(eig.eigenvalues.len());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < floor {
            return Err(AreError::QNotPsd {
                min_eigenvalue: lambda,
            });
        }
        roots[i] = lambda.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Rank test of the stacked observability matrix `[C; CA; …; CA^{n−1}]`.
///
/// Singular values above `tol_rank · σ_max` count toward the rank.
pub fn observability(a: &DMatrix<f64>, c: &DMatrix<f64>, tol_rank: f64) -> bool {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "A must be square");
    assert_eq!(c.ncols(), n, "C must have as many columns as A");
    let rows = c.nrows();
    let mut stacked = DMatrix::zeros(rows * n, n);
    let mut block = c.clone();
    for i in 0..n {
        stacked.view_mut((i * rows, 0), (rows, n)).copy_from(&block);
        if i + 1 < n {
            block = &block * a;
        }
    }
    let sv = stacked.svd(false, false).singular_values;
    let sigma_max = sv.iter().fold(0.0f64, |acc, x| acc.max(*x));
    if sigma_max == 0.0 {
        return n == 0;
    }
    let rank = sv.iter().filter(|&&s| s > tol_rank * sigma_max).count();
    rank == n
}

/// Value iteration for the stationary Riccati equation from the zero seed.
///
/// Stops when `‖P_next − P‖/(1+‖P‖) < tol_are`. When `(A, C)` with
/// `C'C = Q` is observable, the limit is additionally checked positive
/// definite.
pub fn solve_are(ens: &Ensemble, tol_are: f64, max_iter: usize) -> Result<AreFixedPoint, AreError> {
    let n = ens.state_dim();
    solve_are_from(ens, &DMatrix::zeros(n, n), tol_are, max_iter)
}

/// Value iteration from an arbitrary symmetric PSD seed.
///
/// The limit is seed-independent; running from both `0` and `Q` is the
/// uniqueness spot-check used by the test suite.
pub fn solve_are_from(
    ens: &Ensemble,
    seed: &DMatrix<f64>,
    tol_are: f64,
    max_iter: usize,
) -> Result<AreFixedPoint, AreError> {
    let mut p = seed.clone();
    let mut residual = f64::INFINITY;
    for iteration in 1..=max_iter {
        let (p_next, _) = riccati_step(&p, ens)?;
        residual = numeric::relative_gap(&p_next, &p);
        if !residual.is_finite() || !p_next.iter().all(|x| x.is_finite()) {
            return Err(AreError::NoConvergence {
                iterations: iteration,
                residual: f64::INFINITY,
            });
        }
        p = p_next;
        if residual < tol_are {
            let fixed = AreFixedPoint {
                p,
                iterations: iteration,
                residual,
            };
            check_definiteness(ens, &fixed.p)?;
            return Ok(fixed);
        }
    }
    Err(AreError::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

fn check_definiteness(ens: &Ensemble, p: &DMatrix<f64>) -> Result<(), AreError> {
    let c = sqrt_factor(ens.q())?;
    if observability(ens.a(), &c, Tolerances::default().tol_rank) && !numeric::is_pd(p, 1e-9) {
        let (min, _) = numeric::eigen_extremes(p);
        return Err(AreError::NotPositiveDefinite {
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// Solves the steady coordination equation for `P̄` given the stationary `P`.
///
/// Requires `ρ(A+BF̄) < 1`. The equation is a discrete Lyapunov identity
/// `P̄ = (A+BF̄)'P̄(A+BF̄) + W`; it is solved exactly as a linear system in
/// the `n(n+1)/2` half-vectorized unknowns and residual-checked to
/// `tol_are`. See [`solve_pbar_iterative`] for the contraction cross-check.
pub fn solve_pbar(
    p: &DMatrix<f64>,
    fbar: &DMatrix<f64>,
    ens: &Ensemble,
    tol_are: f64,
) -> Result<DMatrix<f64>, AreError> {
    let closed = ens.a() + ens.b() * fbar;
    let rho = spectral_radius(&closed);
    if rho >= 1.0 {
        return Err(AreError::ClosedLoopUnstable {
            spectral_radius: rho,
        });
    }
    let w = coordination_forcing(p, fbar, ens)?;
    let pbar = solve_dlyap_svec(&closed, &w)?;

    let reconstructed = closed.transpose() * &pbar * &closed + &w;
    let residual = numeric::relative_gap(&reconstructed, &pbar);
    if residual > tol_are {
        return Err(AreError::NoConvergence {
            iterations: 1,
            residual,
        });
    }
    Ok(pbar)
}

/// Fixed-point iteration for the steady coordination equation.
///
/// `ρ(A+BF̄) < 1` makes the map a contraction; this route exists as an
/// independent cross-check of [`solve_pbar`].
pub fn solve_pbar_iterative(
    p: &DMatrix<f64>,
    fbar: &DMatrix<f64>,
    ens: &Ensemble,
    tol_are: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>, AreError> {
    let closed = ens.a() + ens.b() * fbar;
    let rho = spectral_radius(&closed);
    if rho >= 1.0 {
        return Err(AreError::ClosedLoopUnstable {
            spectral_radius: rho,
        });
    }
    let w = coordination_forcing(p, fbar, ens)?;
    let mut pbar = DMatrix::zeros(ens.state_dim(), ens.state_dim());
    let mut residual = f64::INFINITY;
    for iteration in 1..=max_iter {
        let next = numeric::symmetrize(&(closed.transpose() * &pbar * &closed + &w));
        residual = numeric::relative_gap(&next, &pbar);
        pbar = next;
        if residual < tol_are {
            return Ok(pbar);
        }
        let _ = iteration;
    }
    Err(AreError::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// `W = F̄'(R+B'PB)F̄ + A'PB(R+B'PB)⁻¹B'PA + A'PBF̄ + F̄'B'PA`.
fn coordination_forcing(
    p: &DMatrix<f64>,
    fbar: &DMatrix<f64>,
    ens: &Ensemble,
) -> Result<DMatrix<f64>, AreError> {
    let (a, b) = (ens.a(), ens.b());
    let gram = numeric::symmetrize(&(ens.r() + b.transpose() * p * b));
    let factor = nalgebra::Cholesky::new(gram.clone())
        .ok_or(AreError::Riccati(RiccatiError::InnerMatrixSingular))?;
    let bpa = b.transpose() * p * a;
    let cross = bpa.transpose() * fbar;
    let w = fbar.transpose() * &gram * fbar
        + bpa.transpose() * factor.solve(&bpa)
        + &cross
        + cross.transpose();
    Ok(numeric::symmetrize(&w))
}

/// Solves `X − M'XM = W` for symmetric `X` by linearizing over the
/// half-vectorized unknowns (one per index pair `i ≤ j`).
fn solve_dlyap_svec(m: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>, AreError> {
    let n = m.nrows();
    let unknowns = n * (n + 1) / 2;
    let mut system = DMatrix::zeros(unknowns, unknowns);
    let mut col = 0;
    for j in 0..n {
        for i in 0..=j {
            let mut basis = DMatrix::zeros(n, n);
            basis[(i, j)] = 1.0;
            basis[(j, i)] = 1.0;
            let image = &basis - m.transpose() * &basis * m;
            system.set_column(col, &svec(&image));
            col += 1;
        }
    }
    let rhs = svec(w);
    let solution = system.lu().solve(&rhs).ok_or(AreError::LyapunovSingular)?;
    Ok(smat(&solution, n))
}

fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let mut out = DVector::zeros(n * (n + 1) / 2);
    let mut idx = 0;
    for j in 0..n {
        for i in 0..=j {
            out[idx] = m[(i, j)];
            idx += 1;
        }
    }
    out
}

fn smat(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    let mut idx = 0;
    for j in 0..n {
        for i in 0..=j {
            out[(i, j)] = v[idx];
            out[(j, i)] = v[idx];
            idx += 1;
        }
    }
    out
}

/// Stabilizing gains from the stationary solution:
/// `K = −(R+B'PB)⁻¹B'PA`, `K̄ = F̄ − K`.
pub fn gains(
    p: &DMatrix<f64>,
    fbar: &DMatrix<f64>,
    ens: &Ensemble,
) -> Result<(DMatrix<f64>, DMatrix<f64>), AreError> {
    let b = ens.b();
    let gram = numeric::symmetrize(&(ens.r() + b.transpose() * p * b));
    let factor = nalgebra::Cholesky::new(gram)
        .ok_or(AreError::Riccati(RiccatiError::InnerMatrixSingular))?;
    let k = -factor.solve(&(b.transpose() * p * ens.a()));
    let k_bar = fbar - &k;
    Ok((k, k_bar))
}

/// Full infinite-horizon synthesis: stationary pair, gains and residuals.
pub fn steady_solution(
    ens: &Ensemble,
    fbar: &DMatrix<f64>,
    tols: &Tolerances,
) -> Result<SteadySolution, AreError> {
    let fixed = solve_are(ens, tols.tol_are, tols.max_are_iter)?;
    let p_bar = solve_pbar(&fixed.p, fbar, ens, tols.tol_are)?;
    let (k, k_bar) = gains(&fixed.p, fbar, ens)?;

    let (p_again, _) = riccati_step(&fixed.p, ens)?;
    let pbar_again = pbar_step(&p_bar, &fixed.p, fbar, ens)?;
    let residuals = SteadyResiduals {
        p: numeric::relative_gap(&p_again, &fixed.p),
        p_bar: numeric::relative_gap(&pbar_again, &p_bar),
    };

    Ok(SteadySolution {
        p: fixed.p,
        p_bar,
        k,
        k_bar,
        iterations: fixed.iterations,
        residuals,
    })
}

/// Evaluates all three stabilization tests and cross-validates them.
///
/// The verdict comes from the spectral-radius test (`ρ(A+BF̄) < 1`), which
/// needs no iteration; convergence of the coupled equations and the
/// definiteness of `P` and `P+P̄` serve as confirmation. Under a
/// stabilizable verdict with observability, any disagreement is returned as
/// [`AreError::InconsistentVerdict`].
pub fn stability_report(
    ens: &Ensemble,
    fbar: &DMatrix<f64>,
    tols: &Tolerances,
) -> Result<StabilityReport, AreError> {
    let closed = ens.a() + ens.b() * fbar;
    let rho = spectral_radius(&closed);
    let verdict = if rho < 1.0 {
        Verdict::Stabilizable
    } else {
        Verdict::NotStabilizable
    };

    let c = sqrt_factor(ens.q())?;
    let observable = observability(ens.a(), &c, tols.tol_rank);

    let mut are_solved = false;
    let mut p_pd = false;
    let mut total_pd = false;
    if let Ok(fixed) = solve_are(ens, tols.tol_are, tols.max_are_iter) {
        p_pd = numeric::is_pd(&fixed.p, 1e-9);
        if rho < 1.0 {
            if let Ok(p_bar) = solve_pbar(&fixed.p, fbar, ens, tols.tol_are) {
                are_solved = true;
                total_pd = numeric::is_pd(&(&fixed.p + &p_bar), 1e-9);
            }
        }
    }

    let report = StabilityReport {
        spectral_radius_closed_loop: rho,
        observable,
        are_solved,
        p_positive_definite: p_pd,
        p_plus_pbar_positive_definite: total_pd,
        verdict,
    };

    if verdict == Verdict::Stabilizable && observable && !(are_solved && p_pd && total_pd) {
        return Err(AreError::InconsistentVerdict {
            details: format!(
                "ρ = {rho:.6} < 1 with observability, yet are_solved={are_solved}, \
                 P>0={p_pd}, P+P̄>0={total_pd}"
            ),
        });
    }

    Ok(report)
}
