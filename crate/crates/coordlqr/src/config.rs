//! The TOML run-configuration format.
//!
//! A run file holds the problem data and run parameters in five sections —
//! `[ensemble]`, `[policy]`, `[initial]`, `[tolerances]`, `[outputs]` —
//! plus the optional top-level `horizon` and `steps` keys. Matrices are
//! nested arrays in row-major order:
//!
//! ```toml
//! horizon = 10
//! steps = 40
//!
//! [ensemble]
//! a = [[2.0]]
//! b = [[1.0]]
//! q = [[1.0]]
//! r = [[1.0]]
//! mu = [0.3, 0.2, 0.3, 0.1, 0.4]
//!
//! [policy]
//! fbar = [[-1.5]]
//!
//! [initial]
//! x0 = [[3.0], [2.0], [1.0], [4.0], [5.0]]
//! ```
//!
//! A time-varying policy replaces `fbar` with `fbar_schedule`, a list of
//! matrices (one per step). [`RunConfig::to_toml_string`] emits a file that
//! re-parses to the identical configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::model::{ConstraintPolicy, Ensemble, InitialCondition, ModelError};
use crate::Tolerances;

/// Configuration loading failures.
#[derive(Debug)]
pub enum ConfigError {
    /// File could not be read.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// TOML syntax or schema error; the message carries the position.
    Parse { message: String },
    /// Structurally valid TOML with inconsistent content.
    Semantic { message: String },
    /// The parsed data failed ensemble validation.
    Model(ModelError),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io { path, source } => {
                write!(f, "cannot read {}: {source}", path.display())
            }
            ConfigError::Parse { message } => write!(f, "{message}"),
            ConfigError::Semantic { message } => write!(f, "{message}"),
            ConfigError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<ModelError> for ConfigError {
    fn from(e: ModelError) -> Self {
        ConfigError::Model(e)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    horizon: Option<usize>,
    steps: Option<usize>,
    ensemble: RawEnsemble,
    policy: RawPolicy,
    initial: Option<RawInitial>,
    tolerances: Option<RawTolerances>,
    outputs: Option<RawOutputs>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnsemble {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    mu: Vec<f64>,
    v: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    fbar: Option<Vec<Vec<f64>>>,
    fbar_schedule: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    x0: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTolerances {
    tol_are: Option<f64>,
    tol_alg: Option<f64>,
    tol_kkt: Option<f64>,
    tol_rank: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutputs {
    dir: Option<PathBuf>,
}

/// A fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Validated problem data.
    pub ensemble: Ensemble,
    /// The prescribed average feedback.
    pub policy: ConstraintPolicy,
    /// Initial states, when the run needs them.
    pub initial: Option<InitialCondition>,
    /// Finite synthesis horizon `N`.
    pub horizon: Option<usize>,
    /// Simulation step count.
    pub steps: Option<usize>,
    /// Solver tolerances (defaults merged with `[tolerances]`).
    pub tolerances: Tolerances,
    /// Output directory from `[outputs]`.
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Loads and validates a run file.
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Parses and validates run-file text.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            message: e.to_string(),
        })?;

        let a = matrix_from_rows("[ensemble].a", &raw.ensemble.a)?;
        let b = matrix_from_rows("[ensemble].b", &raw.ensemble.b)?;
        let q = matrix_from_rows("[ensemble].q", &raw.ensemble.q)?;
        let r = matrix_from_rows("[ensemble].r", &raw.ensemble.r)?;
        let mu = DVector::from_vec(raw.ensemble.mu.clone());
        if let Some(v) = raw.ensemble.v {
            if v != mu.len() {
                return Err(ConfigError::Semantic {
                    message: format!(
                        "[ensemble].v = {v} disagrees with the {} entries of mu",
                        mu.len()
                    ),
                });
            }
        }
        let ensemble = Ensemble::new(a, b, q, r, mu)?;

        let policy = match (&raw.policy.fbar, &raw.policy.fbar_schedule) {
            (Some(gain), None) => {
                ConstraintPolicy::Steady(matrix_from_rows("[policy].fbar", gain)?)
            }
            (None, Some(schedule)) => {
                let gains = schedule
                    .iter()
                    .enumerate()
                    .map(|(k, gain)| {
                        matrix_from_rows(&format!("[policy].fbar_schedule[{k}]"), gain)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if gains.is_empty() {
                    return Err(ConfigError::Semantic {
                        message: "[policy].fbar_schedule must not be empty".to_string(),
                    });
                }
                ConstraintPolicy::Schedule(gains)
            }
            _ => {
                return Err(ConfigError::Semantic {
                    message: "[policy] requires exactly one of fbar or fbar_schedule".to_string(),
                })
            }
        };
        policy.check(&ensemble, None)?;

        let initial = raw
            .initial
            .map(|init| {
                let states = init
                    .x0
                    .iter()
                    .map(|row| DVector::from_vec(row.clone()))
                    .collect();
                InitialCondition::new(states, &ensemble)
            })
            .transpose()?;

        let mut tolerances = Tolerances::default();
        if let Some(t) = raw.tolerances {
            if let Some(x) = t.tol_are {
                tolerances.tol_are = x;
            }
            if let Some(x) = t.tol_alg {
                tolerances.tol_alg = x;
            }
            if let Some(x) = t.tol_kkt {
                tolerances.tol_kkt = x;
            }
            if let Some(x) = t.tol_rank {
                tolerances.tol_rank = x;
            }
        }

        Ok(RunConfig {
            ensemble,
            policy,
            initial,
            horizon: raw.horizon,
            steps: raw.steps,
            tolerances,
            output_dir: raw.outputs.and_then(|o| o.dir),
        })
    }

    /// Emits a run file that re-parses to this configuration, field for
    /// field, at full decimal precision.
    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        if let Some(horizon) = self.horizon {
            out.push_str(&format!("horizon = {horizon}\n"));
        }
        if let Some(steps) = self.steps {
            out.push_str(&format!("steps = {steps}\n"));
        }
        if self.horizon.is_some() || self.steps.is_some() {
            out.push('\n');
        }

        out.push_str("[ensemble]\n");
        out.push_str(&format!("a = {}\n", matrix_literal(self.ensemble.a())));
        out.push_str(&format!("b = {}\n", matrix_literal(self.ensemble.b())));
        out.push_str(&format!("q = {}\n", matrix_literal(self.ensemble.q())));
        out.push_str(&format!("r = {}\n", matrix_literal(self.ensemble.r())));
        let mu: Vec<String> = self
            .ensemble
            .mu()
            .iter()
            .map(|&x| float_literal(x))
            .collect();
        out.push_str(&format!("mu = [{}]\n", mu.join(", ")));
        out.push_str(&format!("v = {}\n", self.ensemble.subsystem_count()));

        out.push_str("\n[policy]\n");
        match &self.policy {
            ConstraintPolicy::Steady(gain) => {
                out.push_str(&format!("fbar = {}\n", matrix_literal(gain)));
            }
            ConstraintPolicy::Schedule(gains) => {
                let entries: Vec<String> = gains.iter().map(matrix_literal).collect();
                out.push_str(&format!("fbar_schedule = [{}]\n", entries.join(", ")));
            }
        }

        if let Some(initial) = &self.initial {
            out.push_str("\n[initial]\n");
            let rows: Vec<String> = initial
                .states()
                .iter()
                .map(|x| {
                    let entries: Vec<String> = x.iter().map(|&v| float_literal(v)).collect();
                    format!("[{}]", entries.join(", "))
                })
                .collect();
            out.push_str(&format!("x0 = [{}]\n", rows.join(", ")));
        }

        out.push_str("\n[tolerances]\n");
        out.push_str(&format!(
            "tol_are = {}\n",
            float_literal(self.tolerances.tol_are)
        ));
        out.push_str(&format!(
            "tol_alg = {}\n",
            float_literal(self.tolerances.tol_alg)
        ));
        out.push_str(&format!(
            "tol_kkt = {}\n",
            float_literal(self.tolerances.tol_kkt)
        ));
        out.push_str(&format!(
            "tol_rank = {}\n",
            float_literal(self.tolerances.tol_rank)
        ));

        if let Some(dir) = &self.output_dir {
            out.push_str("\n[outputs]\n");
            out.push_str(&format!("dir = {:?}\n", dir.display().to_string()));
        }
        out
    }
}

fn matrix_from_rows(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    if rows.is_empty() {
        return Err(ConfigError::Semantic {
            message: format!("{field}: matrix must not be empty"),
        });
    }
    let cols = rows[0].len();
    if cols == 0 {
        return Err(ConfigError::Semantic {
            message: format!("{field}: matrix rows must not be empty"),
        });
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(ConfigError::Semantic {
                message: format!(
                    "{field}: row {i} has {} entries, expected {cols}",
                    row.len()
                ),
            });
        }
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

fn matrix_literal(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let entries: Vec<String> = (0..m.ncols()).map(|j| float_literal(m[(i, j)])).collect();
            format!("[{}]", entries.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

/// Shortest decimal form that re-parses to the same `f64`, forced to look
/// like a TOML float.
fn float_literal(x: f64) -> String {
    let s = format!("{x}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}
