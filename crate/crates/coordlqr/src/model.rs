//! Problem data for the constrained ensemble and its validation.
//!
//! An [`Ensemble`] is `v` subsystems sharing the state map `A`, input map
//! `B` and stage weights `Q`, `R`, each carrying a scalar weight `μ_i`. The
//! weighted averages `x̄_k = Σ μ_i x_k^i`, `ū_k = Σ μ_i u_k^i` are the only
//! coupling channel; a [`ConstraintPolicy`] pins `ū_k = F̄_k x̄_k`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::numeric;

/// Validation and bookkeeping failures for the problem data.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// Matrix or vector dimensions are mutually inconsistent.
    DimensionMismatch { what: String },
    /// A weight matrix deviates from symmetry beyond tolerance.
    NotSymmetric { name: &'static str, deviation: f64 },
    /// `Q` has an eigenvalue below the semidefiniteness tolerance.
    QNotPsd { min_eigenvalue: f64 },
    /// `R` is not positive definite.
    RNotPd { min_eigenvalue: f64 },
    /// All weights vanish: `Σ μ_i² = 0`.
    ZeroWeights,
    /// Weighted-average inputs disagree in count or length.
    LengthMismatch { expected: usize, got: usize },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::DimensionMismatch { what } => {
                write!(f, "DimensionMismatch: {what}")
            }
            ModelError::NotSymmetric { name, deviation } => {
                write!(
                    f,
                    "NotSymmetric: {name} deviates from symmetry by {deviation:.3e}"
                )
            }
            ModelError::QNotPsd { min_eigenvalue } => {
                write!(
                    f,
                    "QNotPSD: smallest eigenvalue {min_eigenvalue:.3e} is below tolerance"
                )
            }
            ModelError::RNotPd { min_eigenvalue } => {
                write!(
                    f,
                    "RNotPD: smallest eigenvalue {min_eigenvalue:.3e} is not strictly positive"
                )
            }
            ModelError::ZeroWeights => {
                write!(
                    f,
                    "ZeroWeights: sum of squared weights must be strictly positive"
                )
            }
            ModelError::LengthMismatch { expected, got } => {
                write!(f, "LengthMismatch: expected {expected} entries, got {got}")
            }
        }
    }
}

impl std::error::Error for ModelError {}

/// Validated problem data for an ensemble of identical linear subsystems.
///
/// Construction through [`Ensemble::new`] establishes the invariants once;
/// the value is immutable afterwards and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    mu: DVector<f64>,
    mu_norm_sq: f64,
}

impl Ensemble {
    /// Validates the raw problem data and returns the ensemble.
    ///
    /// Checks, in order: mutual dimension consistency; symmetry of `Q` and
    /// `R` (inputs within tolerance are replaced by `(M + M')/2`, larger
    /// deviations are rejected); `Q ⪰ 0` and `R ≻ 0` by eigenvalue test
    /// with the relative tolerance `1e-9 · (1 + max |λ|)`; and `Σ μ_i² > 0`.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        mu: DVector<f64>,
    ) -> Result<Self, ModelError> {
        let n = a.nrows();
        let m = b.ncols();
        if a.ncols() != n {
            return Err(ModelError::DimensionMismatch {
                what: format!("A must be square, got {}x{}", a.nrows(), a.ncols()),
            });
        }
        if b.nrows() != n {
            return Err(ModelError::DimensionMismatch {
                what: format!("B must have {} rows, got {}", n, b.nrows()),
            });
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(ModelError::DimensionMismatch {
                what: format!("Q must be {}x{}, got {}x{}", n, n, q.nrows(), q.ncols()),
            });
        }
        if r.nrows() != m || r.ncols() != m {
            return Err(ModelError::DimensionMismatch {
                what: format!("R must be {}x{}, got {}x{}", m, m, r.nrows(), r.ncols()),
            });
        }
        if mu.is_empty() {
            return Err(ModelError::DimensionMismatch {
                what: "at least one subsystem weight is required".to_string(),
            });
        }

        let q = Self::symmetric_or_reject("Q", q)?;
        let r = Self::symmetric_or_reject("R", r)?;

        let (q_min, q_max_abs) = numeric::eigen_extremes(&q);
        if q_min < -PSD_TOL_REL * (1.0 + q_max_abs) {
            return Err(ModelError::QNotPsd {
                min_eigenvalue: q_min,
            });
        }
        let (r_min, r_max_abs) = numeric::eigen_extremes(&r);
        if r_min <= PSD_TOL_REL * (1.0 + r_max_abs) {
            return Err(ModelError::RNotPd {
                min_eigenvalue: r_min,
            });
        }

        let mu_norm_sq = mu.iter().map(|w| w * w).sum::<f64>();
        if mu_norm_sq <= 0.0 {
            return Err(ModelError::ZeroWeights);
        }

        Ok(Ensemble {
            a,
            b,
            q,
            r,
            mu,
            mu_norm_sq,
        })
    }

    fn symmetric_or_reject(
        name: &'static str,
        m: DMatrix<f64>,
    ) -> Result<DMatrix<f64>, ModelError> {
        let scale = 1.0 + m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        let deviation = numeric::asymmetry(&m);
        if deviation > PSD_TOL_REL * scale {
            return Err(ModelError::NotSymmetric { name, deviation });
        }
        Ok(numeric::symmetrize(&m))
    }

    /// State map `A` (`n×n`).
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Input map `B` (`n×m`).
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// State weight `Q` (`n×n`, symmetric PSD).
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// Input weight `R` (`m×m`, symmetric PD).
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Subsystem weights `μ`.
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// `Σ μ_i²`, strictly positive by construction.
    pub fn mu_norm_sq(&self) -> f64 {
        self.mu_norm_sq
    }

    /// Number of subsystems `v`.
    pub fn subsystem_count(&self) -> usize {
        self.mu.len()
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension `m`.
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

/// Relative tolerance of the semidefiniteness and symmetry gates.
const PSD_TOL_REL: f64 = 1e-9;

/// The prescribed feedback on the average state, `ū_k = F̄_k x̄_k`.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintPolicy {
    /// One gain applied at every step (infinite-horizon form).
    Steady(DMatrix<f64>),
    /// One gain per step `k = 0..N`; the schedule must hold `N+1` entries.
    Schedule(Vec<DMatrix<f64>>),
}

impl ConstraintPolicy {
    /// The gain active at step `k`, if the policy covers it.
    pub fn gain_at(&self, k: usize) -> Option<&DMatrix<f64>> {
        match self {
            ConstraintPolicy::Steady(g) => Some(g),
            ConstraintPolicy::Schedule(gains) => gains.get(k),
        }
    }

    /// Checks gain dimensions against the ensemble and, when a horizon is
    /// given, that a schedule supplies exactly `N+1` gains.
    pub fn check(&self, ens: &Ensemble, horizon: Option<usize>) -> Result<(), ModelError> {
        let (m, n) = (ens.input_dim(), ens.state_dim());
        let gains: &[DMatrix<f64>] = match self {
            ConstraintPolicy::Steady(g) => std::slice::from_ref(g),
            ConstraintPolicy::Schedule(gains) => gains,
        };
        for g in gains {
            if g.nrows() != m || g.ncols() != n {
                return Err(ModelError::DimensionMismatch {
                    what: format!(
                        "constraint gain must be {}x{}, got {}x{}",
                        m,
                        n,
                        g.nrows(),
                        g.ncols()
                    ),
                });
            }
        }
        if let (ConstraintPolicy::Schedule(gains), Some(n_steps)) = (self, horizon) {
            if gains.len() != n_steps + 1 {
                return Err(ModelError::LengthMismatch {
                    expected: n_steps + 1,
                    got: gains.len(),
                });
            }
        }
        Ok(())
    }
}

/// Per-subsystem initial states `x_0^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    states: Vec<DVector<f64>>,
}

impl InitialCondition {
    /// Validates that exactly `v` vectors of length `n` are supplied.
    pub fn new(states: Vec<DVector<f64>>, ens: &Ensemble) -> Result<Self, ModelError> {
        if states.len() != ens.subsystem_count() {
            return Err(ModelError::LengthMismatch {
                expected: ens.subsystem_count(),
                got: states.len(),
            });
        }
        for x in &states {
            if x.len() != ens.state_dim() {
                return Err(ModelError::DimensionMismatch {
                    what: format!(
                        "initial state must have length {}, got {}",
                        ens.state_dim(),
                        x.len()
                    ),
                });
            }
        }
        Ok(InitialCondition { states })
    }

    /// The per-subsystem initial states.
    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }
}

/// `Σ_i μ_i · vectors[i]`, the weighted average behind the coupling channel.
///
/// Summation runs in subsystem order so results are reproducible bit for bit.
pub fn weighted_average(
    vectors: &[DVector<f64>],
    mu: &DVector<f64>,
) -> Result<DVector<f64>, ModelError> {
    if vectors.len() != mu.len() || vectors.is_empty() {
        return Err(ModelError::LengthMismatch {
            expected: mu.len(),
            got: vectors.len(),
        });
    }
    let dim = vectors[0].len();
    let mut acc = DVector::zeros(dim);
    for (w, x) in mu.iter().zip(vectors) {
        if x.len() != dim {
            return Err(ModelError::LengthMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        acc.axpy(*w, x, 1.0);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn scalar_ensemble() -> Ensemble {
        Ensemble::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_vec(vec![0.3, 0.2, 0.3, 0.1, 0.4]),
        )
        .expect("reference ensemble is valid")
    }

    #[test]
    fn reference_ensemble_validates() {
        let ens = scalar_ensemble();
        assert_eq!(ens.subsystem_count(), 5);
        assert_eq!(ens.state_dim(), 1);
        assert_eq!(ens.input_dim(), 1);
        assert_abs_diff_eq!(ens.mu_norm_sq(), 0.39, epsilon = 1e-15);
    }

    #[test]
    fn zero_r_is_rejected() {
        let err = Ensemble::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::RNotPd { .. }));
    }

    #[test]
    fn indefinite_q_is_rejected() {
        let err = Ensemble::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5])),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::QNotPsd { .. }));
    }

    #[test]
    fn zero_weights_are_rejected() {
        let err = Ensemble::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_vec(vec![0.0, 0.0, 0.0]),
        )
        .unwrap_err();
        assert_eq!(err, ModelError::ZeroWeights);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let err = Ensemble::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(3, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::DimensionMismatch { .. }));
    }

    #[test]
    fn mild_asymmetry_is_symmetrized_larger_rejected() {
        let mut q = DMatrix::identity(2, 2);
        q[(0, 1)] = 1e-12;
        let ens = Ensemble::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            q,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        assert_abs_diff_eq!(ens.q()[(0, 1)], ens.q()[(1, 0)], epsilon = 0.0);

        let mut q = DMatrix::identity(2, 2);
        q[(0, 1)] = 1e-3;
        let err = Ensemble::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            q,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::NotSymmetric { name: "Q", .. }));
    }

    #[test]
    fn validation_is_idempotent() {
        let ens = scalar_ensemble();
        let again = Ensemble::new(
            ens.a().clone(),
            ens.b().clone(),
            ens.q().clone(),
            ens.r().clone(),
            ens.mu().clone(),
        )
        .unwrap();
        assert_eq!(ens, again);
    }

    #[test]
    fn weighted_average_matches_reference_value() {
        let mu = DVector::from_vec(vec![0.3, 0.2, 0.3, 0.1, 0.4]);
        let states: Vec<_> = [3.0, 2.0, 1.0, 4.0, 5.0]
            .iter()
            .map(|&x| DVector::from_vec(vec![x]))
            .collect();
        let avg = weighted_average(&states, &mu).unwrap();
        assert_abs_diff_eq!(avg[0], 4.0, epsilon = 1e-15);
    }

    #[test]
    fn weighted_average_edge_cases() {
        let mu = DVector::from_vec(vec![0.5, -0.5]);
        let zeros = vec![DVector::zeros(3), DVector::zeros(3)];
        assert_eq!(weighted_average(&zeros, &mu).unwrap(), DVector::zeros(3));

        let single = vec![DVector::from_vec(vec![1.0, -2.0])];
        let one = DVector::from_vec(vec![1.0]);
        assert_eq!(weighted_average(&single, &one).unwrap(), single[0]);

        let err = weighted_average(&single, &mu).unwrap_err();
        assert!(matches!(err, ModelError::LengthMismatch { .. }));
    }

    #[test]
    fn weighted_average_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let v = rng.random_range(1..5);
            let dim = rng.random_range(1..4);
            let mu = DVector::from_fn(v, |_, _| rng.random_range(-1.0..1.0));
            let us: Vec<DVector<f64>> = (0..v)
                .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let ws: Vec<DVector<f64>> = (0..v)
                .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let alpha: f64 = rng.random_range(-2.0..2.0);
            let beta: f64 = rng.random_range(-2.0..2.0);
            let mixed: Vec<DVector<f64>> = us
                .iter()
                .zip(&ws)
                .map(|(u, w)| alpha * u + beta * w)
                .collect();
            let lhs = weighted_average(&mixed, &mu).unwrap();
            let rhs = alpha * weighted_average(&us, &mu).unwrap()
                + beta * weighted_average(&ws, &mu).unwrap();
            assert_abs_diff_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn schedule_policy_length_is_checked() {
        let ens = scalar_ensemble();
        let gain = DMatrix::from_element(1, 1, -1.5);
        let policy = ConstraintPolicy::Schedule(vec![gain.clone(); 3]);
        assert!(policy.check(&ens, Some(2)).is_ok());
        assert!(matches!(
            policy.check(&ens, Some(4)),
            Err(ModelError::LengthMismatch {
                expected: 5,
                got: 3
            })
        ));
        let bad = ConstraintPolicy::Steady(DMatrix::zeros(2, 1));
        assert!(matches!(
            bad.check(&ens, None),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn initial_condition_is_checked() {
        let ens = scalar_ensemble();
        let good: Vec<_> = (0..5).map(|i| DVector::from_vec(vec![i as f64])).collect();
        assert!(InitialCondition::new(good, &ens).is_ok());
        let short = vec![DVector::from_vec(vec![1.0]); 3];
        assert!(matches!(
            InitialCondition::new(short, &ens),
            Err(ModelError::LengthMismatch {
                expected: 5,
                got: 3
            })
        ));
    }
}
