//! Acceptance suite: every criterion prints one PASS/FAIL line
//! (`cargo test --test acceptance -- --nocapture` shows them all).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use coordlqr::are::{spectral_radius, steady_solution};
use coordlqr::model::{weighted_average, ConstraintPolicy, Ensemble, InitialCondition};
use coordlqr::riccati::{coordination_cost, naive_policy_value, optimal_cost, synthesize_finite};
use coordlqr::sim::{
    accumulated_cost, average_feedback_coefficients, constraint_check, simulate, GainSource,
};
use coordlqr::verify::{
    costates_closed_form, instance_rng, mp_residuals, oracle_campaign, random_instance,
    random_stabilizable_ensemble, stabilization_audit, InstanceLimits,
};
use coordlqr::Tolerances;

const CAMPAIGN_SEED: u64 = 42;
const CAMPAIGN_SIZE: usize = 50;

fn reference_ensemble() -> Ensemble {
    Ensemble::new(
        DMatrix::from_element(1, 1, 2.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_vec(vec![0.3, 0.2, 0.3, 0.1, 0.4]),
    )
    .expect("reference ensemble is valid")
}

fn reference_gain() -> DMatrix<f64> {
    DMatrix::from_element(1, 1, -1.5)
}

fn reference_initial(ens: &Ensemble) -> InitialCondition {
    InitialCondition::new(
        [3.0, 2.0, 1.0, 4.0, 5.0]
            .iter()
            .map(|&x| DVector::from_vec(vec![x]))
            .collect(),
        ens,
    )
    .expect("reference initial condition is valid")
}

fn verdict(criterion: &str, pass: bool) {
    println!(
        "criterion {criterion}: {}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &x| acc.min(x))
}

#[test]
fn criterion_1_reference_regression() {
    let start = Instant::now();
    let ens = reference_ensemble();
    let sol = steady_solution(&ens, &reference_gain(), &Tolerances::default()).unwrap();
    let coefficients = average_feedback_coefficients(&ens, &sol.k_bar);
    let elapsed = start.elapsed();

    let expected_coeffs = [0.0908, 0.0605, 0.0908, 0.0303, 0.1210];
    let mut pass = (sol.p[(0, 0)] - 4.2361).abs() <= 5e-4
        && (sol.p_bar[(0, 0)] - 0.0972).abs() <= 5e-4
        && (sol.k[(0, 0)] - (-1.6180)).abs() <= 5e-4
        && (sol.k_bar[(0, 0)] - 0.1180).abs() <= 5e-4;
    for (c, e) in coefficients.iter().zip(expected_coeffs) {
        pass &= (c[(0, 0)] - e).abs() <= 5e-4;
    }
    pass &= elapsed.as_secs_f64() < 1.0;

    verdict(
        "1 (steady gains and coefficients reproduce the reference values)",
        pass,
    );
    assert!(
        pass,
        "P={} Pbar={} K={} Kbar={} coefficients={:?} elapsed={:?}",
        sol.p[(0, 0)],
        sol.p_bar[(0, 0)],
        sol.k[(0, 0)],
        sol.k_bar[(0, 0)],
        coefficients.iter().map(|c| c[(0, 0)]).collect::<Vec<_>>(),
        elapsed
    );
}

#[test]
fn criterion_2_reference_convergence() {
    let start = Instant::now();
    let ens = reference_ensemble();
    let fbar = reference_gain();
    let sol = steady_solution(&ens, &fbar, &Tolerances::default()).unwrap();
    let policy = ConstraintPolicy::Steady(fbar);
    let ic = reference_initial(&ens);
    let traj = simulate(&ens, &sol, &policy, &ic, 40).unwrap();
    let final_norm = traj.final_max_state_norm();
    let elapsed = start.elapsed();

    let pass = final_norm < 1e-6 && elapsed.as_secs_f64() < 1.0;
    verdict(
        "2 (simulated ensemble converges to zero within 40 steps)",
        pass,
    );
    assert!(
        pass,
        "max_i |x_40^i| = {final_norm:.3e}, elapsed={elapsed:?}"
    );
}

#[test]
fn criterion_3_oracle_equivalence() {
    let start = Instant::now();
    let comparisons = oracle_campaign(
        CAMPAIGN_SIZE,
        CAMPAIGN_SEED,
        &InstanceLimits::default(),
        &Tolerances::default(),
    )
    .unwrap();
    let elapsed = start.elapsed();

    let max_cost_gap = comparisons
        .iter()
        .map(|c| c.cost_gap)
        .fold(0.0f64, f64::max);
    let max_control_gap = comparisons
        .iter()
        .map(|c| c.control_gap)
        .fold(0.0f64, f64::max);
    let pass = comparisons.len() == CAMPAIGN_SIZE
        && max_cost_gap <= 1e-7
        && max_control_gap <= 1e-6
        && elapsed.as_secs_f64() < 30.0;

    verdict(
        "3 (closed-form synthesis matches the KKT oracle on 50 seeded instances)",
        pass,
    );
    assert!(
        pass,
        "max cost gap {max_cost_gap:.3e}, max control gap {max_control_gap:.3e}, \
         elapsed={elapsed:?}"
    );
}

#[test]
fn criterion_4_maximum_principle_residuals() {
    let limits = InstanceLimits::default();
    let mut max_equilibrium = 0.0f64;
    let mut max_adjoint = 0.0f64;
    let mut terminal_costates_zero = true;

    for index in 0..CAMPAIGN_SIZE {
        let mut rng = instance_rng(CAMPAIGN_SEED, index);
        let inst = random_instance(&mut rng, &limits);
        let schedule = synthesize_finite(&inst.ensemble, &inst.policy, inst.horizon).unwrap();
        let traj = simulate(
            &inst.ensemble,
            &schedule,
            &inst.policy,
            &inst.initial,
            inst.horizon + 1,
        )
        .unwrap();
        let trace = costates_closed_form(&traj, &schedule, &inst.ensemble).unwrap();
        for p in &trace.p[inst.horizon] {
            terminal_costates_zero &= p.iter().all(|&x| x == 0.0);
        }
        let (eq, adj) = mp_residuals(&traj, &trace, &inst.ensemble, &inst.policy).unwrap();
        max_equilibrium = max_equilibrium.max(eq);
        max_adjoint = max_adjoint.max(adj);
    }

    let pass = max_equilibrium <= 1e-8 && max_adjoint <= 1e-8 && terminal_costates_zero;
    verdict(
        "4 (maximum-principle residuals vanish at the synthesized optimum)",
        pass,
    );
    assert!(
        pass,
        "equilibrium {max_equilibrium:.3e}, adjoint {max_adjoint:.3e}, \
         terminal costates zero: {terminal_costates_zero}"
    );
}

#[test]
fn criterion_5_lyapunov_identity() {
    let limits = InstanceLimits::default();
    let mut max_gap = 0.0f64;
    for index in 0..CAMPAIGN_SIZE {
        let mut rng = instance_rng(CAMPAIGN_SEED, index);
        let inst = random_instance(&mut rng, &limits);
        let schedule = synthesize_finite(&inst.ensemble, &inst.policy, inst.horizon).unwrap();
        let lyapunov = naive_policy_value(&inst.ensemble, &inst.policy, inst.horizon).unwrap();
        for (k, s) in lyapunov.iter().enumerate() {
            let total = &schedule.p()[k] + &schedule.p_bar()[k];
            max_gap = max_gap.max((s - total).norm() / (1.0 + s.norm()));
        }
    }

    let pass = max_gap <= 1e-9;
    verdict(
        "5 (value pair sums to the naive-policy Lyapunov recursion at every step)",
        pass,
    );
    assert!(pass, "max relative gap {max_gap:.3e}");
}

#[test]
fn criterion_6_stabilization_equivalence_audit() {
    let outcomes = stabilization_audit(
        CAMPAIGN_SIZE,
        CAMPAIGN_SEED,
        &InstanceLimits::default(),
        &Tolerances::default(),
    );
    let disagreements: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.consistent())
        .map(|(i, _)| i)
        .collect();
    let stabilizable = outcomes.iter().filter(|o| o.by_spectral_radius).count();

    let pass = outcomes.len() == CAMPAIGN_SIZE
        && disagreements.is_empty()
        && stabilizable > 0
        && stabilizable < CAMPAIGN_SIZE;
    verdict(
        "6 (spectral-radius, ARE and decay verdicts agree on 50 observable instances)",
        pass,
    );
    assert!(
        pass,
        "disagreeing instances {disagreements:?}, stabilizable {stabilizable}/{CAMPAIGN_SIZE}"
    );
}

#[test]
fn criterion_7_structural_invariants() {
    let limits = InstanceLimits::default();
    let mut head_coordination_psd = true;
    let mut constraint_exact = true;

    for index in 0..CAMPAIGN_SIZE {
        let mut rng = instance_rng(CAMPAIGN_SEED, index);
        let inst = random_instance(&mut rng, &limits);
        let schedule = synthesize_finite(&inst.ensemble, &inst.policy, inst.horizon).unwrap();

        let head = &schedule.p_bar()[0];
        let scale = 1.0 + head.norm();
        head_coordination_psd &= min_symmetric_eigenvalue(head) >= -1e-9 * scale;

        let traj = simulate(
            &inst.ensemble,
            &schedule,
            &inst.policy,
            &inst.initial,
            inst.horizon + 1,
        )
        .unwrap();
        constraint_exact &= constraint_check(&traj, &inst.policy).unwrap() <= 1e-9;
    }

    // Horizon monotonicity of the head value matrix under a constant gain.
    let mut monotone = true;
    for index in 0..10 {
        let mut rng = instance_rng(CAMPAIGN_SEED.wrapping_add(1), index);
        let inst = random_instance(&mut rng, &limits);
        let policy = ConstraintPolicy::Steady(inst.policy.gain_at(0).unwrap().clone());
        let mut previous: Option<DMatrix<f64>> = None;
        for horizon in 0..=8 {
            let schedule = synthesize_finite(&inst.ensemble, &policy, horizon).unwrap();
            let head = schedule.p()[0].clone();
            if let Some(prev) = previous.take() {
                let growth = &head - &prev;
                monotone &= min_symmetric_eigenvalue(&growth) >= -1e-9 * (1.0 + head.norm());
            }
            previous = Some(head);
        }
    }

    // Choosing the optimal gains as the constraint zeroes the coupling and
    // the coordination cost.
    let ens = reference_ensemble();
    let seeded = synthesize_finite(&ens, &ConstraintPolicy::Steady(reference_gain()), 40).unwrap();
    let degenerate_policy = ConstraintPolicy::Schedule(seeded.k().to_vec());
    let degenerate = synthesize_finite(&ens, &degenerate_policy, 40).unwrap();
    let coupling_zero = degenerate.k_bar().iter().all(|k| k.norm() <= 1e-9);
    let ic = reference_initial(&ens);
    let coordination = coordination_cost(&degenerate, &ic, &ens).unwrap();

    let pass = head_coordination_psd
        && constraint_exact
        && monotone
        && coupling_zero
        && coordination <= 1e-9;
    verdict(
        "7 (coordination PSD, horizon monotonicity, exact constraint, degenerate gain)",
        pass,
    );
    assert!(
        pass,
        "coordination PSD: {head_coordination_psd}, constraint exact: {constraint_exact}, \
         monotone: {monotone}, coupling zero: {coupling_zero}, \
         coordination cost {coordination:.3e}"
    );
}

#[test]
fn criterion_8_infinite_horizon_cost() {
    let tols = Tolerances::default();
    let mut cases = Vec::new();

    let ens = reference_ensemble();
    let ic = reference_initial(&ens);
    cases.push((ens, reference_gain(), ic));

    let limits = InstanceLimits::default();
    let mut rng = instance_rng(CAMPAIGN_SEED.wrapping_add(2), 0);
    for _ in 0..5 {
        cases.push(random_stabilizable_ensemble(&mut rng, &limits));
    }

    let mut max_gap = 0.0f64;
    for (ens, fbar, ic) in &cases {
        let sol = steady_solution(ens, fbar, &tols).unwrap();
        let policy = ConstraintPolicy::Steady(fbar.clone());

        let avg = weighted_average(ic.states(), ens.mu()).unwrap();
        let local: f64 = ic.states().iter().map(|x| x.dot(&(&sol.p * x))).sum();
        let closed_form = local + avg.dot(&(&sol.p_bar * &avg)) / ens.mu_norm_sq();

        // Truncate once the geometric tail is negligible.
        let rho_local = spectral_radius(&(ens.a() + ens.b() * &sol.k));
        let rho_avg = spectral_radius(&(ens.a() + ens.b() * fbar));
        let rho_hat = rho_local.max(rho_avg);
        let steps = ((1e-12f64.ln() / (2.0 * rho_hat.ln())).ceil() as usize).clamp(100, 30_000);

        let gains = GainSource::Steady {
            feedback: &sol.k,
            coupling: &sol.k_bar,
        };
        let traj = simulate(ens, gains, &policy, ic, steps).unwrap();
        let simulated = accumulated_cost(&traj);
        max_gap = max_gap.max((simulated - closed_form).abs() / (1.0 + closed_form.abs()));
    }

    let pass = max_gap <= 1e-6;
    verdict(
        "8 (truncated accumulated cost converges to the closed-form optimum)",
        pass,
    );
    assert!(
        pass,
        "max relative gap {max_gap:.3e} over {} cases",
        cases.len()
    );
}

#[test]
fn finite_horizon_cost_matches_simulation_on_reference_instance() {
    // Companion check: the closed-form optimal cost equals the simulated
    // accumulated cost when the run covers the full horizon.
    let ens = reference_ensemble();
    let policy = ConstraintPolicy::Steady(reference_gain());
    let ic = reference_initial(&ens);
    let horizon = 60;
    let schedule = synthesize_finite(&ens, &policy, horizon).unwrap();
    let expected = optimal_cost(&schedule, &ic, &ens).unwrap();
    let traj = simulate(&ens, &schedule, &policy, &ic, horizon + 1).unwrap();
    let simulated = accumulated_cost(&traj);
    assert!(
        (simulated - expected).abs() / (1.0 + expected) <= 1e-9,
        "simulated {simulated} vs closed form {expected}"
    );
}
