//! Experiment configuration, seeded batch runs and JSON/CSV reports behind the `maskident` binary.

use crate::counterexamples::{self, CounterexamplePair};
use crate::linalg::{self, Mat};
use crate::models::{self, Model, ModelJson, Observation, DEFAULT_CONDITION_FLOOR};
use crate::predictors::{self, MaskedTask, PredictorFn, TaskShape};
use crate::recovery::{self, GhmmProbeOptions, PairwiseOptions, RecoveryOptions, RecoveryReport};
use crate::seeding::{derived_rng, splitmix64};
use crate::tensor_engine;
use clap::{Parser, ValueEnum};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};
use thiserror::Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "MASKIDENT_THREADS";

#[derive(Error, Debug)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    fn config(path: &str, msg: impl std::fmt::Display) -> CliError {
        CliError::Config(format!("{path}: {msg}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Predict,
    Recover,
    Counterexample,
    KruskalRank,
    VerifyFixtures,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Predict => "predict",
            Command::Recover => "recover",
            Command::Counterexample => "counterexample",
            Command::KruskalRank => "kruskal-rank",
            Command::VerifyFixtures => "verify-fixtures",
        }
    }
}

/// Random instance description. Without `seed`, trial i draws its instance from the trial seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    #[serde(default = "default_kind")]
    pub kind: String,
    pub d: usize,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub symmetric: bool,
    #[serde(default = "default_floor")]
    pub condition_floor: f64,
}

fn default_kind() -> String {
    "hmm".into()
}
fn default_floor() -> f64 {
    DEFAULT_CONDITION_FLOOR
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Pass threshold for recovery errors.
    #[serde(default = "default_error_tol")]
    pub error: f64,
    /// Allowed deviation of recovered transitions from double stochasticity.
    #[serde(default = "default_error_tol")]
    pub consistency: f64,
    /// Predictor discrepancy allowed by the counterexample validator.
    #[serde(default = "default_discrepancy_tol")]
    pub discrepancy: f64,
}

fn default_error_tol() -> f64 {
    1e-6
}
fn default_discrepancy_tol() -> f64 {
    1e-8
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { error: default_error_tol(), consistency: default_error_tol(), discrepancy: default_discrepancy_tol() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    SimplexRotation,
    PowerRotation,
    Householder,
    FixtureA,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// `"fixture"` or `"random"` base for the simplex rotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<Observation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub construction: Option<Construction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameters: Option<CounterexampleParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_json: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_csv: Option<PathBuf>,
}

fn default_trials() -> u64 {
    1
}

const METHODS: [&str; 4] = ["jennrich", "eigen-pair", "far-field", "density"];

/// Strict parse: unknown keys, bad values and missing command-specific fields are errors
/// naming the offending path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "<root>".to_string() } else { path };
        CliError::config(&path, e.inner())
    })?;
    validate_config(&cfg)?;
    Ok(cfg)
}

fn validate_config(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.trials == 0 {
        return Err(CliError::config("trials", "must be at least 1"));
    }
    for (name, v) in [("error", cfg.tolerances.error), ("consistency", cfg.tolerances.consistency), ("discrepancy", cfg.tolerances.discrepancy)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CliError::config(&format!("tolerances.{name}"), "must be positive"));
        }
    }
    let sources = cfg.model.is_some() as u8 + cfg.model_file.is_some() as u8 + cfg.generator.is_some() as u8;
    if sources > 1 {
        return Err(CliError::config("model", "give only one of model, model_file, generator"));
    }
    if let Some(p) = &cfg.model_file {
        if !p.is_file() {
            return Err(CliError::config("model_file", format!("{} does not exist", p.display())));
        }
    }
    if let Some(g) = &cfg.generator {
        if g.kind != "hmm" && g.kind != "ghmm" {
            return Err(CliError::config("generator.kind", format!("unknown kind {:?} (expected hmm or ghmm)", g.kind)));
        }
        if g.k < 1 || g.k > g.d {
            return Err(CliError::config("generator", format!("need 1 <= k <= d, got d={}, k={}", g.d, g.k)));
        }
    }
    if let Some(t) = &cfg.task {
        t.parse::<MaskedTask>().map_err(|e| CliError::config("task", e))?;
    }
    if let Some(m) = &cfg.method {
        if !METHODS.contains(&m.as_str()) {
            return Err(CliError::config("method", format!("unknown method {m:?} (expected one of {})", METHODS.join(", "))));
        }
    }
    match cfg.command {
        Command::Predict | Command::Recover => {
            if sources == 0 {
                return Err(CliError::config("model", format!("{} needs one of model, model_file, generator", cfg.command.name())));
            }
            if cfg.task.is_none() && !(cfg.command == Command::Recover && cfg.method.as_deref() == Some("density")) {
                return Err(CliError::config("task", format!("required for {}", cfg.command.name())));
            }
        }
        Command::Counterexample => {
            if cfg.construction.is_none() {
                return Err(CliError::config("construction", "required for counterexample"));
            }
        }
        Command::KruskalRank => {
            if cfg.matrix.is_none() && cfg.shape.is_none() {
                return Err(CliError::config("matrix", "kruskal-rank needs a matrix or a shape"));
            }
            if let Some(m) = &cfg.matrix {
                linalg::from_rows(m).ok_or_else(|| CliError::config("matrix", "rows must be non-empty and of equal length"))?;
            }
        }
        Command::VerifyFixtures => {}
    }
    Ok(())
}

/// Default configuration for a command run without `--config`.
pub fn default_config(command: Command) -> ExperimentConfig {
    ExperimentConfig {
        command,
        model: None,
        model_file: None,
        generator: None,
        task: None,
        method: None,
        trials: 1,
        seed: 0,
        tolerances: Tolerances::default(),
        inputs: None,
        construction: None,
        parameters: None,
        matrix: None,
        shape: None,
        out_json: None,
        out_csv: None,
    }
}

/// One trial's outcome. Wall time is kept out of the row so that rows are deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: u64,
    pub seed: u64,
    pub method: String,
    pub err_primary: Option<f64>,
    pub err_transition: Option<f64>,
    pub residual: Option<f64>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub trials: u64,
    pub passed: u64,
    pub failed: u64,
    pub max_err_primary: Option<f64>,
    pub median_err_primary: Option<f64>,
    pub max_err_transition: Option<f64>,
    pub median_err_transition: Option<f64>,
    pub max_residual: Option<f64>,
}

/// Wall-clock data; the only part of a report that varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub timestamp_unix_ms: u128,
    pub total_ms: f64,
    pub trial_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub tool: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub rows: Vec<TrialRow>,
    pub aggregate: Aggregate,
    pub timing: Timing,
}

impl BatchReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
    pub fn exit_code(&self) -> i32 {
        if self.all_pass() {
            0
        } else {
            1
        }
    }
}

fn max_and_median(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
    let mut v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return (None, None);
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    (Some(v[n - 1]), Some(median))
}

pub fn aggregate(rows: &[TrialRow]) -> Aggregate {
    let passed = rows.iter().filter(|r| r.pass).count() as u64;
    let (max_err_primary, median_err_primary) = max_and_median(rows.iter().map(|r| r.err_primary));
    let (max_err_transition, median_err_transition) = max_and_median(rows.iter().map(|r| r.err_transition));
    let (max_residual, _) = max_and_median(rows.iter().map(|r| r.residual));
    Aggregate {
        trials: rows.len() as u64,
        passed,
        failed: rows.len() as u64 - passed,
        max_err_primary,
        median_err_primary,
        max_err_transition,
        median_err_transition,
        max_residual,
    }
}

fn finite(v: Option<f64>) -> Option<f64> {
    v.filter(|x| x.is_finite())
}

fn row(trial: u64, seed: u64, method: &str) -> TrialRow {
    TrialRow { trial, seed, method: method.into(), err_primary: None, err_transition: None, residual: None, pass: false, error: None, detail: Value::Null }
}

fn failed(mut r: TrialRow, e: impl std::fmt::Display) -> TrialRow {
    r.pass = false;
    r.error = Some(e.to_string());
    r
}

fn load_model(cfg: &ExperimentConfig, trial_seed: u64) -> Result<Model, String> {
    if let Some(j) = &cfg.model {
        return Model::from_json(j).map_err(|e| e.to_string());
    }
    if let Some(p) = &cfg.model_file {
        let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
        let j: ModelJson = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?;
        return Model::from_json(&j).map_err(|e| e.to_string());
    }
    let g = cfg.generator.as_ref().ok_or("no model source")?;
    let seed = g.seed.unwrap_or(trial_seed);
    let m = if g.kind == "ghmm" {
        Model::Ghmm(models::random_ghmm(g.d, g.k, seed, g.symmetric, g.condition_floor).map_err(|e| e.to_string())?)
    } else {
        Model::Hmm(models::random_hmm(g.d, g.k, seed, g.symmetric, g.condition_floor).map_err(|e| e.to_string())?)
    };
    Ok(m)
}

fn default_method(model: &Model, task: Option<&MaskedTask>) -> &'static str {
    match (model, task.map(|t| t.shape())) {
        (Model::Ghmm(_), Some(TaskShape::Pairwise)) => "far-field",
        (Model::Ghmm(_), None) => "density",
        _ => "jennrich",
    }
}

fn report_detail(r: &RecoveryReport) -> Value {
    let mut v = serde_json::to_value(r).unwrap_or(Value::Null);
    if let Value::Object(map) = &mut v {
        map.remove("wall_ms");
    }
    v
}

fn run_recover(cfg: &ExperimentConfig, trial: u64, seed: u64) -> TrialRow {
    let model = match load_model(cfg, seed) {
        Ok(m) => m,
        Err(e) => return failed(row(trial, seed, cfg.method.as_deref().unwrap_or("")), e),
    };
    let task: Option<MaskedTask> = cfg.task.as_ref().map(|t| t.parse().expect("validated"));
    let method = cfg.method.clone().unwrap_or_else(|| default_method(&model, task.as_ref()).to_string());
    let mut r = row(trial, seed, &method);
    if method == "density" {
        let Model::Ghmm(p) = &model else { return failed(r, "density recovery needs a ghmm model") };
        return match recovery::recover_t_from_conditional_density(p, &p.means, seed) {
            Ok(d) => {
                let err = linalg::max_abs_diff(&d.transition, &p.transition);
                r.err_transition = finite(Some(err));
                r.pass = err <= cfg.tolerances.error;
                r.detail = json!({"condition": d.condition, "resamples": d.resamples, "perturbation": d.perturbation});
                r
            }
            Err(e) => failed(r, e),
        };
    }
    let task = task.expect("validated");
    let oracle = match PredictorFn::new(model.clone(), task.clone()) {
        Ok(o) => o,
        Err(e) => return failed(r, e),
    };
    let opts = RecoveryOptions { consistency_tol: cfg.tolerances.consistency };
    let (d, k) = (model.d(), model.k());
    let result = match (&model, method.as_str(), task.shape()) {
        (Model::Hmm(_), "jennrich", TaskShape::TwoGivenOne) => recovery::recover_hmm_two_given_one(&oracle, d, k, seed, opts),
        (Model::Hmm(p), "jennrich", TaskShape::OneGivenTwo) => {
            let (c0, c1) = (task.conditioned[0], task.conditioned[1]);
            predictors::joint_pair_distribution(p, c0.min(c1), c0.max(c1))
                .map_err(recovery::RecoveryError::from)
                .and_then(|j| {
                    let j = if c0 < c1 { j } else { j.transpose() };
                    recovery::recover_hmm_one_given_two(&oracle, &j, d, k, seed, opts)
                })
        }
        (Model::Hmm(_), "eigen-pair", TaskShape::TwoGivenOne) => recovery::recover_hmm_eigen_pair(&oracle, None, d, k, seed, opts),
        (Model::Ghmm(_), "jennrich", TaskShape::TwoGivenOne) => {
            let o = GhmmProbeOptions { consistency_tol: cfg.tolerances.consistency, ..Default::default() };
            recovery::recover_ghmm_two_given_one(&oracle, d, k, seed, &o)
        }
        (Model::Ghmm(_), "far-field", TaskShape::Pairwise) => recovery::recover_ghmm_pairwise(&oracle, d, k, seed, PairwiseOptions::default()),
        _ => return failed(r, format!("method {method} does not apply to a {} model with task {task}", model.kind())),
    };
    match result.and_then(|mut rep| rep.compare_to(&model).map(|_| rep)) {
        Ok(rep) => {
            r.err_primary = finite(rep.error_primary);
            r.err_transition = finite(rep.error_transition);
            r.residual = finite(rep.tensor_residual);
            r.pass = matches!(rep.max_error(), Some(e) if e <= cfg.tolerances.error);
            r.detail = report_detail(&rep);
            r
        }
        Err(e) => failed(r, e),
    }
}

fn random_inputs(model: &Model, n: usize, seed: u64) -> Vec<Observation> {
    let mut rng = derived_rng(seed, 5);
    (0..n)
        .map(|_| match model {
            Model::Hmm(p) => Observation::Discrete(rng.random_range(0..p.d())),
            Model::Ghmm(p) => Observation::Continuous(
                (0..p.d())
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    })
                    .collect(),
            ),
        })
        .collect()
}

fn run_predict(cfg: &ExperimentConfig, trial: u64, seed: u64) -> TrialRow {
    let mut r = row(trial, seed, "closed-form");
    let model = match load_model(cfg, seed) {
        Ok(m) => m,
        Err(e) => return failed(r, e),
    };
    let task: MaskedTask = cfg.task.as_ref().expect("validated").parse().expect("validated");
    let inputs = cfg.inputs.clone().unwrap_or_else(|| random_inputs(&model, task.conditioned.len(), seed));
    match predictors::predict(&model, &task, &inputs) {
        Ok(p) => {
            let discrete = matches!(model, Model::Hmm(_));
            let sum_dev = (p.sum() - 1.0).abs();
            r.residual = discrete.then_some(sum_dev);
            r.pass = !discrete || sum_dev <= cfg.tolerances.error;
            r.detail = json!({"task": task.to_string(), "inputs": inputs, "prediction": p.to_json()});
            r
        }
        Err(e) => failed(r, e),
    }
}

fn fixture_a_pair() -> CounterexamplePair {
    let models::FixtureBundle::PairwiseHmmCounterexample { original, alternative } = models::fixture(models::FixtureName::PairwiseHmmCounterexample) else {
        unreachable!()
    };
    CounterexamplePair {
        original: Model::Hmm(original),
        alternative: Model::Hmm(alternative),
        tasks: counterexamples::pairwise_tasks(),
        construction: "fixture_a".into(),
        theta: None,
    }
}

fn run_counterexample(cfg: &ExperimentConfig, trial: u64, seed: u64) -> TrialRow {
    let construction = cfg.construction.expect("validated");
    let params = cfg.parameters.clone().unwrap_or_default();
    let name = serde_json::to_value(construction).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let mut r = row(trial, seed, &name);
    let tol = cfg.tolerances.discrepancy;
    let pair = match construction {
        Construction::FixtureA => Ok(fixture_a_pair()),
        Construction::SimplexRotation => {
            let has_model = cfg.model.is_some() || cfg.model_file.is_some() || cfg.generator.is_some();
            let base = if has_model {
                match load_model(cfg, seed) {
                    Ok(Model::Hmm(p)) => Ok(p),
                    Ok(Model::Ghmm(_)) => Err("simplex rotation needs an hmm base".to_string()),
                    Err(e) => Err(e),
                }
            } else if params.base.as_deref() == Some("fixture") {
                match fixture_a_pair().original {
                    Model::Hmm(p) => Ok(p),
                    Model::Ghmm(_) => unreachable!(),
                }
            } else {
                models::random_simplex_base(params.d.unwrap_or(4), seed).map_err(|e| e.to_string())
            };
            base.and_then(|b| counterexamples::simplex_rotation_pair(&b, params.theta.unwrap_or(0.05)).map_err(|e| e.to_string()))
        }
        Construction::PowerRotation => counterexamples::power_rotation_pair(params.t.unwrap_or(2), params.a.unwrap_or(0.5))
            .map(|(p, _)| p)
            .map_err(|e| e.to_string()),
        Construction::Householder => {
            let (d, k) = (params.d.unwrap_or(3), params.k.unwrap_or(2));
            let p = match models::random_ghmm(d, k, seed, false, DEFAULT_CONDITION_FLOOR) {
                Ok(p) => p,
                Err(e) => return failed(r, e),
            };
            return match counterexamples::householder_certificate(&p) {
                Ok(c) => {
                    let inv = counterexamples::posterior_invariance(&p, &c, 100, seed);
                    r.err_primary = finite(Some(c.column_sum_residual));
                    r.residual = finite(Some(inv));
                    r.pass = c.passes && inv <= 1e-10;
                    r.detail = json!({"column_sums": c.column_sums, "v_hat": c.v_hat.as_slice()});
                    r
                }
                Err(e) => failed(r, e),
            };
        }
    };
    let pair = match pair {
        Ok(p) => p,
        Err(e) => return failed(r, e),
    };
    match counterexamples::validate_counterexample(&pair, tol, seed) {
        Ok(v) => {
            r.err_primary = finite(Some(v.max_discrepancy));
            r.residual = finite(Some(v.parameter_distance));
            r.pass = v.passes;
            r.detail = json!({"theta": pair.theta, "validation": v, "alternative": pair.alternative});
            r
        }
        Err(e) => failed(r, e),
    }
}

fn run_kruskal(cfg: &ExperimentConfig, trial: u64, seed: u64) -> TrialRow {
    let mut r = row(trial, seed, "kruskal-rank");
    let m = match (&cfg.matrix, cfg.shape) {
        (Some(rows), _) => linalg::from_rows(rows).expect("validated"),
        (None, Some([n, c])) => {
            let mut rng = derived_rng(seed, 6);
            Mat::from_fn(n, c, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
        }
        _ => unreachable!("validated"),
    };
    match tensor_engine::kruskal_rank(&m) {
        Ok(kr) => {
            r.pass = true;
            r.detail = json!({"kruskal_rank": kr, "rank": linalg::numerical_rank(&m, linalg::RANK_RTOL), "rows": m.nrows(), "cols": m.ncols()});
            r
        }
        Err(e) => failed(r, e),
    }
}

fn check_row(index: u64, name: &str, pass: bool, primary: f64, transition: Option<f64>, residual: Option<f64>) -> TrialRow {
    let mut r = row(index, 0, name);
    r.err_primary = finite(Some(primary));
    r.err_transition = finite(transition);
    r.residual = finite(residual);
    r.pass = pass;
    r
}

/// Self-test of the embedded fixtures. One row per check; `trials` is ignored.
pub fn verify_fixtures() -> Vec<TrialRow> {
    let mut rows = Vec::new();
    let pair = fixture_a_pair();
    for (label, m) in [("original", &pair.original), ("alternative", &pair.alternative)] {
        let dev = (linalg::gram_volume(m.observation_matrix()) - 0.0110).abs();
        rows.push(check_row(rows.len() as u64, &format!("fixture_a.{label}.det_emission"), dev <= 5e-4, dev, None, None));
        let dev = (m.transition().determinant() + 0.1611).abs();
        rows.push(check_row(rows.len() as u64, &format!("fixture_a.{label}.det_transition"), dev <= 5e-4, dev, None, None));
    }
    match counterexamples::validate_counterexample(&pair, 1e-6, 0) {
        Ok(v) => {
            rows.push(check_row(rows.len() as u64, "fixture_a.predictor_equality", v.max_discrepancy <= 1e-6, v.max_discrepancy, None, None));
            rows.push(check_row(rows.len() as u64, "fixture_a.emission_distance", v.emission_distance >= 0.01, v.emission_distance, None, None));
        }
        Err(e) => rows.push(failed(row(rows.len() as u64, 0, "fixture_a.validation"), e)),
    }
    for t in 2..=10 {
        let name = format!("fixture_b.t{t}");
        match counterexamples::power_rotation_pair(t, 0.5) {
            Ok((_, d)) => {
                let pass = d.power_residual <= 1e-10
                    && d.stochastic_residual <= 1e-10
                    && d.commutation_residual <= 1e-10
                    && d.min_entry >= -1e-12
                    && d.transition_distance >= 1e-3;
                rows.push(check_row(rows.len() as u64, &name, pass, d.power_residual, Some(d.stochastic_residual), Some(d.commutation_residual)));
            }
            Err(e) => rows.push(failed(row(rows.len() as u64, 0, &name), e)),
        }
    }
    rows
}

/// Worker count from `MASKIDENT_THREADS` (unset or invalid: rayon default).
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0)
}

/// Runs every trial (seed of trial i = splitmix64(config.seed, i)) and assembles the report
/// in trial order.
pub fn run_batch(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<BatchReport, CliError> {
    let started = Instant::now();
    let timestamp_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let timed: Vec<(TrialRow, f64)> = if cfg.command == Command::VerifyFixtures {
        let t0 = Instant::now();
        let rows = verify_fixtures();
        let per = t0.elapsed().as_secs_f64() * 1e3 / rows.len() as f64;
        rows.into_iter().map(|r| (r, per)).collect()
    } else {
        let run = |i: u64| {
            let t0 = Instant::now();
            let seed = splitmix64(cfg.seed, i);
            let r = match cfg.command {
                Command::Predict => run_predict(cfg, i, seed),
                Command::Recover => run_recover(cfg, i, seed),
                Command::Counterexample => run_counterexample(cfg, i, seed),
                Command::KruskalRank => run_kruskal(cfg, i, seed),
                Command::VerifyFixtures => unreachable!(),
            };
            (r, t0.elapsed().as_secs_f64() * 1e3)
        };
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..cfg.trials).into_par_iter().map(run).collect())
    };
    let (rows, trial_ms): (Vec<TrialRow>, Vec<f64>) = timed.into_iter().unzip();
    Ok(BatchReport {
        tool: "maskident".into(),
        version: VERSION.into(),
        config: cfg.clone(),
        aggregate: aggregate(&rows),
        rows,
        timing: Timing { timestamp_unix_ms, total_ms: started.elapsed().as_secs_f64() * 1e3, trial_ms },
    })
}

fn fmt_real(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

pub const CSV_HEADER: [&str; 8] = ["trial", "seed", "method", "err_primary", "err_transition", "residual", "ms", "pass"];

pub fn write_csv<W: std::io::Write>(report: &BatchReport, w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for (r, ms) in report.rows.iter().zip(&report.timing.trial_ms) {
        out.write_record([
            r.trial.to_string(),
            r.seed.to_string(),
            r.method.clone(),
            fmt_real(r.err_primary),
            fmt_real(r.err_transition),
            fmt_real(r.residual),
            fmt_real(Some(*ms)),
            r.pass.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn report_json(report: &BatchReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

/// Writes the JSON report and/or CSV table.
pub fn emit_reports(report: &BatchReport, json_path: Option<&Path>, csv_path: Option<&Path>) -> Result<(), CliError> {
    let io = |p: &Path, e: &dyn std::fmt::Display| CliError::Io { path: p.to_path_buf(), message: e.to_string() };
    if let Some(p) = json_path {
        std::fs::write(p, report_json(report) + "\n").map_err(|e| io(p, &e))?;
    }
    if let Some(p) = csv_path {
        let f = std::fs::File::create(p).map_err(|e| io(p, &e))?;
        write_csv(report, f).map_err(|e| io(p, &e))?;
    }
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "maskident", version, about = "Masked-prediction identifiability experiments")]
pub struct Cli {
    pub command: Command,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Full command-line entry point; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_parsed(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("maskident: {e}");
            2
        }
    }
}

fn run_parsed(cli: &Cli) -> Result<i32, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io { path: p.clone(), message: e.to_string() })?;
            parse_config(&text)?
        }
        None => {
            let cfg = default_config(cli.command);
            validate_config(&cfg)?;
            cfg
        }
    };
    if cfg.command != cli.command {
        return Err(CliError::config("command", format!("config is for {:?} but {:?} was requested", cfg.command.name(), cli.command.name())));
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.out_json.is_some() {
        cfg.out_json = cli.out_json.clone();
    }
    if cli.out_csv.is_some() {
        cfg.out_csv = cli.out_csv.clone();
    }
    let report = run_batch(&cfg, threads_from_env())?;
    emit_reports(&report, cfg.out_json.as_deref(), cfg.out_csv.as_deref())?;
    if cfg.out_json.is_none() {
        println!("{}", report_json(&report));
    }
    let agg = &report.aggregate;
    eprintln!("maskident {}: {}/{} trials passed", cfg.command.name(), agg.passed, agg.trials);
    Ok(report.exit_code())
}
