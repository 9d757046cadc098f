//! Command implementations behind the `coordlqr` binary.
//!
//! Exit-code contract: 0 success, 1 input error, 2 not stabilizable,
//! 3 verification failure. Every command prints a JSON report on stdout;
//! `synthesize`, `simulate` and `verify` additionally write their artifacts
//! into the output directory (`--out`, else `[outputs].dir`, else `out/`).

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::are::{stability_report, steady_solution, Verdict};
use crate::config::{ConfigError, RunConfig};
use crate::model::{weighted_average, ConstraintPolicy};
use crate::riccati::{naive_policy_value, optimal_cost, synthesize_finite};
use crate::sim::{
    accumulated_cost, average_feedback_coefficients, constraint_check, simulate, Trajectory,
};
use crate::verify::{compare_instance, oracle_campaign, InstanceLimits, RandomInstance};

/// Command completed as requested.
pub const EXIT_SUCCESS: i32 = 0;
/// Configuration or data could not be used.
pub const EXIT_INPUT_ERROR: i32 = 1;
/// The constrained ensemble is not stabilizable.
pub const EXIT_NOT_STABILIZABLE: i32 = 2;
/// A verification tolerance was exceeded.
pub const EXIT_VERIFICATION_FAILURE: i32 = 3;

/// Verification thresholds applied by `verify`.
const COST_GAP_LIMIT: f64 = 1e-7;
const CONTROL_GAP_LIMIT: f64 = 1e-6;
const MP_RESIDUAL_LIMIT: f64 = 1e-8;
const CONSTRAINT_RESIDUAL_LIMIT: f64 = 1e-9;
const CAMPAIGN_SIZE: usize = 50;
const DEFAULT_SEED: u64 = 42;
const DEFAULT_STEADY_STEPS: usize = 40;

/// Command-line overrides of the run configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Finite synthesis horizon `N`.
    pub horizon: Option<usize>,
    /// Simulation step count.
    pub steps: Option<usize>,
    /// Campaign seed.
    pub seed: Option<u64>,
    /// Output directory.
    pub out: Option<PathBuf>,
}

/// What a command hands back to `main`.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    /// Process exit code per the contract above.
    pub exit_code: i32,
    /// JSON report for stdout.
    pub report: Value,
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    /// Process exit code.
    pub exit_code: i32,
    /// Human-readable cause.
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        input_error(e)
    }
}

fn input_error(e: impl fmt::Display) -> CliError {
    CliError {
        exit_code: EXIT_INPUT_ERROR,
        message: e.to_string(),
    }
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    let rows: Vec<Value> = (0..m.nrows())
        .map(|i| Value::from((0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<f64>>()))
        .collect();
    Value::from(rows)
}

/// The gain the stability tests run against: the steady gain, or the tail
/// gain of a schedule (it governs the long-run average loop).
fn report_gain(policy: &ConstraintPolicy) -> &DMatrix<f64> {
    match policy {
        ConstraintPolicy::Steady(gain) => gain,
        ConstraintPolicy::Schedule(gains) => gains.last().expect("schedules are non-empty"),
    }
}

fn output_dir(cfg: &RunConfig, ov: &Overrides) -> PathBuf {
    ov.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| input_error(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, content)
        .map_err(|e| input_error(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn stability_json(report: &crate::are::StabilityReport) -> Value {
    json!({
        "spectral_radius": report.spectral_radius_closed_loop,
        "verdict": report.verdict.to_string(),
        "observable": report.observable,
        "are_solved": report.are_solved,
        "p_positive_definite": report.p_positive_definite,
        "p_plus_pbar_positive_definite": report.p_plus_pbar_positive_definite,
    })
}

/// `synthesize`: distributed gains plus the stability report.
///
/// With a horizon the finite schedule is computed and emitted regardless of
/// the verdict; without one the steady solution is required and a
/// not-stabilizable verdict exits with code 2.
pub fn cmd_synthesize(cfg: &RunConfig, ov: &Overrides) -> Result<CommandOutput, CliError> {
    let ens = &cfg.ensemble;
    let fbar = report_gain(&cfg.policy);
    let stability = stability_report(ens, fbar, &cfg.tolerances).map_err(input_error)?;

    let mut report = json!({
        "stability": stability_json(&stability),
        "spectral_radius": stability.spectral_radius_closed_loop,
        "verdict": stability.verdict.to_string(),
        "P": Value::Null,
        "Pbar": Value::Null,
        "K": Value::Null,
        "Kbar": Value::Null,
        "cost": Value::Null,
        "residuals": Value::Null,
    });

    let horizon = ov.horizon.or(cfg.horizon);
    let exit_code = match horizon {
        Some(n) => {
            let schedule = synthesize_finite(ens, &cfg.policy, n).map_err(input_error)?;
            report["mode"] = json!("finite");
            report["horizon"] = json!(n);
            report["P"] = matrix_json(&schedule.p()[0]);
            report["Pbar"] = matrix_json(&schedule.p_bar()[0]);
            report["K"] = matrix_json(&schedule.k()[0]);
            report["Kbar"] = matrix_json(&schedule.k_bar()[0]);
            if let Some(ic) = &cfg.initial {
                report["cost"] = json!(optimal_cost(&schedule, ic, ens).map_err(input_error)?);
            }

            // Cross-check: the naive-policy Lyapunov recursion must equal
            // P_k + P̄_k at every step.
            let lyapunov = naive_policy_value(ens, &cfg.policy, n).map_err(input_error)?;
            let mut identity_gap = 0.0f64;
            for (k, s) in lyapunov.iter().enumerate() {
                let total = &schedule.p()[k] + &schedule.p_bar()[k];
                identity_gap = identity_gap.max((s - total).norm() / (1.0 + s.norm()));
            }
            report["residuals"] = json!({ "lyapunov_identity": identity_gap });

            let steps: Vec<Value> = (0..=n)
                .map(|k| {
                    json!({
                        "step": k,
                        "P": matrix_json(&schedule.p()[k]),
                        "Pbar": matrix_json(&schedule.p_bar()[k]),
                        "K": matrix_json(&schedule.k()[k]),
                        "Kbar": matrix_json(&schedule.k_bar()[k]),
                    })
                })
                .collect();
            report["schedule"] = Value::from(steps);
            EXIT_SUCCESS
        }
        None => {
            report["mode"] = json!("steady");
            if stability.verdict == Verdict::NotStabilizable {
                EXIT_NOT_STABILIZABLE
            } else {
                let sol = steady_solution(ens, fbar, &cfg.tolerances).map_err(input_error)?;
                report["P"] = matrix_json(&sol.p);
                report["Pbar"] = matrix_json(&sol.p_bar);
                report["K"] = matrix_json(&sol.k);
                report["Kbar"] = matrix_json(&sol.k_bar);
                report["iterations"] = json!(sol.iterations);
                report["residuals"] = json!({ "p": sol.residuals.p, "pbar": sol.residuals.p_bar });
                if let Some(ic) = &cfg.initial {
                    let avg = weighted_average(ic.states(), ens.mu()).map_err(input_error)?;
                    let local: f64 = ic.states().iter().map(|x| x.dot(&(&sol.p * x))).sum();
                    let cost = local + avg.dot(&(&sol.p_bar * &avg)) / ens.mu_norm_sq();
                    report["cost"] = json!(cost);
                }
                EXIT_SUCCESS
            }
        }
    };

    let dir = output_dir(cfg, ov);
    write_file(&dir, "report.json", &format!("{:#}\n", report))?;
    write_file(&dir, "resolved_config.toml", &cfg.to_toml_string())?;

    Ok(CommandOutput { exit_code, report })
}

/// `report`: the stability tests alone.
pub fn cmd_report(cfg: &RunConfig, _ov: &Overrides) -> Result<CommandOutput, CliError> {
    let stability = stability_report(&cfg.ensemble, report_gain(&cfg.policy), &cfg.tolerances)
        .map_err(input_error)?;
    let exit_code = if stability.verdict == Verdict::Stabilizable {
        EXIT_SUCCESS
    } else {
        EXIT_NOT_STABILIZABLE
    };
    Ok(CommandOutput {
        exit_code,
        report: stability_json(&stability),
    })
}

fn significant(x: f64) -> String {
    format!("{x:.16e}")
}

fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.states[0][0].len();
    let m = traj.controls.first().map(|row| row[0].len()).unwrap_or(0);
    let mut out = String::from("step,subsystem");
    for j in 1..=n {
        out.push_str(&format!(",x{j}"));
    }
    for j in 1..=m {
        out.push_str(&format!(",u{j}"));
    }
    out.push('\n');
    for k in 0..traj.steps() {
        for (i, (x, u)) in traj.states[k].iter().zip(&traj.controls[k]).enumerate() {
            out.push_str(&format!("{k},{}", i + 1));
            for value in x.iter() {
                out.push_str(&format!(",{}", significant(*value)));
            }
            for value in u.iter() {
                out.push_str(&format!(",{}", significant(*value)));
            }
            out.push('\n');
        }
    }
    out
}

fn averages_csv(traj: &Trajectory) -> String {
    let n = traj.avg_state[0].len();
    let m = traj.avg_control.first().map(|u| u.len()).unwrap_or(0);
    let mut out = String::from("step");
    for j in 1..=n {
        out.push_str(&format!(",xbar{j}"));
    }
    for j in 1..=m {
        out.push_str(&format!(",ubar{j}"));
    }
    out.push_str(",stage_cost,constraint_residual\n");
    for k in 0..traj.steps() {
        out.push_str(&format!("{k}"));
        for value in traj.avg_state[k].iter() {
            out.push_str(&format!(",{}", significant(*value)));
        }
        for value in traj.avg_control[k].iter() {
            out.push_str(&format!(",{}", significant(*value)));
        }
        out.push_str(&format!(
            ",{},{}\n",
            significant(traj.stage_costs[k]),
            significant(traj.constraint_residuals[k])
        ));
    }
    out
}

/// `simulate`: run the closed loop and write the trajectory files.
///
/// A steady policy simulates the steady gains unless `--horizon` forces a
/// finite schedule; a schedule policy always runs the finite synthesis and
/// takes its horizon from the flag or the config.
pub fn cmd_simulate(cfg: &RunConfig, ov: &Overrides) -> Result<CommandOutput, CliError> {
    let ens = &cfg.ensemble;
    let ic = cfg
        .initial
        .as_ref()
        .ok_or_else(|| input_error("simulate requires an [initial] section"))?;

    let horizon = ov.horizon.or(match &cfg.policy {
        ConstraintPolicy::Schedule(_) => cfg.horizon,
        ConstraintPolicy::Steady(_) => None,
    });
    let mut summary = json!({});
    let traj = match horizon {
        Some(n) => {
            let schedule = synthesize_finite(ens, &cfg.policy, n).map_err(input_error)?;
            let steps = ov.steps.or(cfg.steps).unwrap_or(n + 1);
            summary["mode"] = json!("finite");
            summary["horizon"] = json!(n);
            simulate(ens, &schedule, &cfg.policy, ic, steps).map_err(input_error)?
        }
        None => {
            let fbar = report_gain(&cfg.policy);
            let stability = stability_report(ens, fbar, &cfg.tolerances).map_err(input_error)?;
            if stability.verdict == Verdict::NotStabilizable {
                return Ok(CommandOutput {
                    exit_code: EXIT_NOT_STABILIZABLE,
                    report: stability_json(&stability),
                });
            }
            let sol = steady_solution(ens, fbar, &cfg.tolerances).map_err(input_error)?;
            let steps = ov.steps.or(cfg.steps).unwrap_or(DEFAULT_STEADY_STEPS);
            summary["mode"] = json!("steady");

            let coefficients: Vec<Value> = average_feedback_coefficients(ens, &sol.k_bar)
                .iter()
                .map(matrix_json)
                .collect();
            summary["average_feedback_coefficients"] = Value::from(coefficients);

            let avg = weighted_average(ic.states(), ens.mu()).map_err(input_error)?;
            let local: f64 = ic.states().iter().map(|x| x.dot(&(&sol.p * x))).sum();
            summary["closed_form_cost"] =
                json!(local + avg.dot(&(&sol.p_bar * &avg)) / ens.mu_norm_sq());

            simulate(ens, &sol, &cfg.policy, ic, steps).map_err(input_error)?
        }
    };

    let cost = accumulated_cost(&traj);
    summary["steps"] = json!(traj.steps());
    summary["accumulated_cost"] = json!(cost);
    summary["final_max_state_norm"] = json!(traj.final_max_state_norm());
    summary["max_constraint_residual"] =
        json!(constraint_check(&traj, &cfg.policy).map_err(input_error)?);
    if let Some(closed_form) = summary["closed_form_cost"].as_f64() {
        summary["cost_gap_relative"] = json!((cost - closed_form).abs() / (1.0 + closed_form));
    }

    let dir = output_dir(cfg, ov);
    let trajectory_path = write_file(&dir, "trajectory.csv", &trajectory_csv(&traj))?;
    let averages_path = write_file(&dir, "averages.csv", &averages_csv(&traj))?;
    summary["files"] = json!({
        "trajectory": trajectory_path.display().to_string(),
        "averages": averages_path.display().to_string(),
    });
    write_file(&dir, "summary.json", &format!("{:#}\n", summary))?;

    Ok(CommandOutput {
        exit_code: EXIT_SUCCESS,
        report: summary,
    })
}

/// `verify`: oracle and maximum-principle checks on the configured instance
/// plus a seeded randomized campaign.
pub fn cmd_verify(cfg: &RunConfig, ov: &Overrides) -> Result<CommandOutput, CliError> {
    let ens = &cfg.ensemble;
    let horizon = ov
        .horizon
        .or(cfg.horizon)
        .ok_or_else(|| input_error("verify requires a finite horizon (--horizon or config)"))?;
    let ic = cfg
        .initial
        .as_ref()
        .ok_or_else(|| input_error("verify requires an [initial] section"))?;
    let seed = ov.seed.unwrap_or(DEFAULT_SEED);

    let instance = RandomInstance {
        ensemble: ens.clone(),
        policy: cfg.policy.clone(),
        horizon,
        initial: ic.clone(),
    };
    let comparison = compare_instance(&instance, &cfg.tolerances).map_err(input_error)?;

    let schedule = synthesize_finite(ens, &cfg.policy, horizon).map_err(input_error)?;
    let traj = simulate(ens, &schedule, &cfg.policy, ic, horizon + 1).map_err(input_error)?;
    let constraint_residual = constraint_check(&traj, &cfg.policy).map_err(input_error)?;

    let instance_pass = comparison.cost_gap <= COST_GAP_LIMIT
        && comparison.control_gap <= CONTROL_GAP_LIMIT
        && comparison.equilibrium_residual <= MP_RESIDUAL_LIMIT
        && comparison.adjoint_residual <= MP_RESIDUAL_LIMIT
        && constraint_residual <= CONSTRAINT_RESIDUAL_LIMIT;

    let campaign = oracle_campaign(
        CAMPAIGN_SIZE,
        seed,
        &InstanceLimits::default(),
        &cfg.tolerances,
    )
    .map_err(input_error)?;
    let fold_max = |f: fn(&crate::verify::OracleComparison) -> f64| {
        campaign.iter().map(f).fold(0.0f64, f64::max)
    };
    let max_cost_gap = fold_max(|c| c.cost_gap);
    let max_control_gap = fold_max(|c| c.control_gap);
    let max_equilibrium = fold_max(|c| c.equilibrium_residual);
    let max_adjoint = fold_max(|c| c.adjoint_residual);
    let campaign_pass = max_cost_gap <= COST_GAP_LIMIT
        && max_control_gap <= CONTROL_GAP_LIMIT
        && max_equilibrium <= MP_RESIDUAL_LIMIT
        && max_adjoint <= MP_RESIDUAL_LIMIT;

    let pass = instance_pass && campaign_pass;
    let report = json!({
        "instance": {
            "horizon": horizon,
            "cost_gap": comparison.cost_gap,
            "control_gap": comparison.control_gap,
            "kkt_residual": comparison.kkt_residual,
            "equilibrium_residual": comparison.equilibrium_residual,
            "adjoint_residual": comparison.adjoint_residual,
            "constraint_residual": constraint_residual,
            "pass": instance_pass,
        },
        "campaign": {
            "instances": CAMPAIGN_SIZE,
            "seed": seed,
            "max_cost_gap": max_cost_gap,
            "max_control_gap": max_control_gap,
            "max_equilibrium_residual": max_equilibrium,
            "max_adjoint_residual": max_adjoint,
            "pass": campaign_pass,
        },
        "thresholds": {
            "cost_gap": COST_GAP_LIMIT,
            "control_gap": CONTROL_GAP_LIMIT,
            "mp_residual": MP_RESIDUAL_LIMIT,
            "constraint_residual": CONSTRAINT_RESIDUAL_LIMIT,
        },
        "pass": pass,
    });

    let dir = output_dir(cfg, ov);
    write_file(&dir, "verification.json", &format!("{:#}\n", report))?;

    let exit_code = if pass {
        EXIT_SUCCESS
    } else {
        EXIT_VERIFICATION_FAILURE
    };
    Ok(CommandOutput { exit_code, report })
}
