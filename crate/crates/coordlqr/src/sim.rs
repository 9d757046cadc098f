//! Closed-loop simulation of the ensemble and cost accounting.
//!
//! Each step applies the distributed law
//! `u_k^i = K_k x_k^i + (μ_i / Σμ²) K̄_k x̄_k`, advances every subsystem
//! through the shared dynamics and records averages, stage costs and
//! constraint residuals. Per-subsystem updates within a step are
//! independent given the step-start average and fan out over rayon when the
//! `parallel` feature is enabled; the weighted averages are always reduced
//! in subsystem order so trajectories are bit-identical either way.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::are::SteadySolution;
use crate::exec;
use crate::model::{weighted_average, ConstraintPolicy, Ensemble, InitialCondition, ModelError};
use crate::riccati::GainSchedule;

/// Simulation failures.
#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    /// More steps requested than the gain schedule or policy covers.
    HorizonExceeded { steps: usize, available: usize },
    /// Invalid policy, gains or initial data.
    Model(ModelError),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::HorizonExceeded { steps, available } => write!(
                f,
                "HorizonExceeded: {steps} steps requested but gains cover only {available}"
            ),
            SimError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SimError {}

impl From<ModelError> for SimError {
    fn from(e: ModelError) -> Self {
        SimError::Model(e)
    }
}

/// Where the distributed gains come from.
#[derive(Debug, Clone, Copy)]
pub enum GainSource<'a> {
    /// Time-varying gains of a finite-horizon schedule.
    Schedule(&'a GainSchedule),
    /// One gain pair applied at every step.
    Steady {
        /// Local feedback gain `K`.
        feedback: &'a DMatrix<f64>,
        /// Average-coupling gain `K̄`.
        coupling: &'a DMatrix<f64>,
    },
}

impl<'a> From<&'a GainSchedule> for GainSource<'a> {
    fn from(s: &'a GainSchedule) -> Self {
        GainSource::Schedule(s)
    }
}

impl<'a> From<&'a SteadySolution> for GainSource<'a> {
    fn from(s: &'a SteadySolution) -> Self {
        GainSource::Steady {
            feedback: &s.k,
            coupling: &s.k_bar,
        }
    }
}

impl<'a> GainSource<'a> {
    fn pair(&self, step: usize) -> (&'a DMatrix<f64>, &'a DMatrix<f64>) {
        match self {
            GainSource::Schedule(s) => (&s.k()[step], &s.k_bar()[step]),
            GainSource::Steady { feedback, coupling } => (feedback, coupling),
        }
    }

    fn available_steps(&self) -> Option<usize> {
        match self {
            GainSource::Schedule(s) => Some(s.horizon() + 1),
            GainSource::Steady { .. } => None,
        }
    }
}

/// Recorded closed-loop run.
///
/// With `steps` control applications, `states` and `avg_state` hold
/// `steps + 1` entries (`x_0 .. x_steps`) while `controls`, `avg_control`,
/// `stage_costs` and `constraint_residuals` hold `steps` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Per-step, per-subsystem states `x_k^i`.
    pub states: Vec<Vec<DVector<f64>>>,
    /// Per-step, per-subsystem controls `u_k^i`.
    pub controls: Vec<Vec<DVector<f64>>>,
    /// Weighted average states `x̄_k`.
    pub avg_state: Vec<DVector<f64>>,
    /// Weighted average controls `ū_k`.
    pub avg_control: Vec<DVector<f64>>,
    /// `Σ_i [x_k^i'Q x_k^i + u_k^i'R u_k^i]` per step.
    pub stage_costs: Vec<f64>,
    /// `‖ū_k − F̄_k x̄_k‖` per step.
    pub constraint_residuals: Vec<f64>,
}

impl Trajectory {
    /// Number of control applications.
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    /// `max_i ‖x_steps^i‖` at the final recorded state.
    pub fn final_max_state_norm(&self) -> f64 {
        self.states
            .last()
            .map(|xs| xs.iter().map(|x| x.norm()).fold(0.0, f64::max))
            .unwrap_or(0.0)
    }
}

/// Per-subsystem average-feedback coefficients `(μ_i / Σμ²) K̄`.
pub fn average_feedback_coefficients(ens: &Ensemble, coupling: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    ens.mu()
        .iter()
        .map(|&w| coupling * (w / ens.mu_norm_sq()))
        .collect()
}

/// Runs the distributed law for `steps` control applications.
///
/// A finite schedule must cover the run (`steps ≤ N+1`); a schedule policy
/// must supply a gain for every applied step.
pub fn simulate<'a>(
    ens: &Ensemble,
    gains: impl Into<GainSource<'a>>,
    policy: &ConstraintPolicy,
    ic: &InitialCondition,
    steps: usize,
) -> Result<Trajectory, SimError> {
    let gains = gains.into();
    policy.check(ens, None)?;
    if let Some(available) = gains.available_steps() {
        if steps > available {
            return Err(SimError::HorizonExceeded { steps, available });
        }
    }
    if steps > 0 && policy.gain_at(steps - 1).is_none() {
        let available = match policy {
            ConstraintPolicy::Schedule(g) => g.len(),
            ConstraintPolicy::Steady(_) => usize::MAX,
        };
        return Err(SimError::HorizonExceeded { steps, available });
    }

    run(ens, policy, ic, steps, |step, avg| {
        let (feedback, coupling) = gains.pair(step);
        StepLaw::Distributed {
            feedback,
            shared: coupling * avg,
        }
    })
}

/// Advances the ensemble under externally supplied controls.
///
/// Exists for oracle cross-checks: the recorded residuals still measure the
/// given policy, so constraint violations of the injected controls show up.
pub fn simulate_open_loop(
    ens: &Ensemble,
    policy: &ConstraintPolicy,
    ic: &InitialCondition,
    controls: &[Vec<DVector<f64>>],
) -> Result<Trajectory, SimError> {
    policy.check(ens, None)?;
    let steps = controls.len();
    if steps > 0 && policy.gain_at(steps - 1).is_none() {
        let available = match policy {
            ConstraintPolicy::Schedule(g) => g.len(),
            ConstraintPolicy::Steady(_) => usize::MAX,
        };
        return Err(SimError::HorizonExceeded { steps, available });
    }
    for row in controls {
        if row.len() != ens.subsystem_count() {
            return Err(SimError::Model(ModelError::LengthMismatch {
                expected: ens.subsystem_count(),
                got: row.len(),
            }));
        }
    }
    run(ens, policy, ic, steps, |step, _| {
        StepLaw::Injected(&controls[step])
    })
}

/// How the controls of one step are produced.
enum StepLaw<'a> {
    /// `u_k^i = K x_k^i + (μ_i/Σμ²) · shared` with `shared = K̄ x̄_k`.
    Distributed {
        feedback: &'a DMatrix<f64>,
        shared: DVector<f64>,
    },
    /// Externally supplied controls.
    Injected(&'a [DVector<f64>]),
}

fn run<'a>(
    ens: &Ensemble,
    policy: &ConstraintPolicy,
    ic: &InitialCondition,
    steps: usize,
    law_at: impl Fn(usize, &DVector<f64>) -> StepLaw<'a>,
) -> Result<Trajectory, SimError> {
    let v = ens.subsystem_count();
    let scale = ens.mu_norm_sq();
    let mut traj = Trajectory {
        states: Vec::with_capacity(steps + 1),
        controls: Vec::with_capacity(steps),
        avg_state: Vec::with_capacity(steps + 1),
        avg_control: Vec::with_capacity(steps),
        stage_costs: Vec::with_capacity(steps),
        constraint_residuals: Vec::with_capacity(steps),
    };
    traj.states.push(ic.states().to_vec());

    for step in 0..steps {
        let states = traj.states.last().expect("seeded with the initial states");
        let avg = weighted_average(states, ens.mu())?;
        let law = law_at(step, &avg);

        // Independent per-subsystem update; results collect in subsystem
        // order regardless of how the work is split.
        let advanced = exec::map_indexed_fine(v, |i| {
            let x = &states[i];
            let u = match &law {
                StepLaw::Distributed { feedback, shared } => {
                    *feedback * x + shared * (ens.mu()[i] / scale)
                }
                StepLaw::Injected(row) => row[i].clone(),
            };
            let next = ens.a() * x + ens.b() * &u;
            let cost = x.dot(&(ens.q() * x)) + u.dot(&(ens.r() * &u));
            (u, next, cost)
        });

        let mut controls = Vec::with_capacity(v);
        let mut next_states = Vec::with_capacity(v);
        let mut stage_cost = 0.0;
        for (u, next, cost) in advanced {
            controls.push(u);
            next_states.push(next);
            stage_cost += cost;
        }

        let avg_control = weighted_average(&controls, ens.mu())?;
        let fbar = policy
            .gain_at(step)
            .expect("policy length checked by callers");
        let residual = (&avg_control - fbar * &avg).norm();

        traj.avg_state.push(avg);
        traj.avg_control.push(avg_control);
        traj.stage_costs.push(stage_cost);
        traj.constraint_residuals.push(residual);
        traj.controls.push(controls);
        traj.states.push(next_states);
    }

    let last = traj.states.last().expect("seeded with the initial states");
    traj.avg_state.push(weighted_average(last, ens.mu())?);
    Ok(traj)
}

/// Sum of the recorded stage costs.
pub fn accumulated_cost(traj: &Trajectory) -> f64 {
    traj.stage_costs.iter().sum()
}

/// `max_k ‖ū_k − F̄_k x̄_k‖` recomputed from the recorded averages.
pub fn constraint_check(traj: &Trajectory, policy: &ConstraintPolicy) -> Result<f64, SimError> {
    let mut max_residual = 0.0f64;
    for (step, u_avg) in traj.avg_control.iter().enumerate() {
        let fbar = policy.gain_at(step).ok_or(SimError::HorizonExceeded {
            steps: traj.steps(),
            available: step,
        })?;
        let residual = (u_avg - fbar * &traj.avg_state[step]).norm();
        max_residual = max_residual.max(residual);
    }
    Ok(max_residual)
}
