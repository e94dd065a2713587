//! Posterior functions and the exact optimal predictors for masked-prediction tasks.
//!
//! Every supported task touches at most three time steps. Given the hidden state at the
//! middle time step (the anchor), the observed tokens are conditionally independent, so each
//! predictor is a product of per-token factors `G * P(anchor -> t)` where `G` is the
//! emission (or means) matrix and `P` propagates the hidden state forward with `T` or
//! backward with `T^T` (the reversed chain of a doubly stochastic transition).

use crate::linalg::{self, Mat, Vector};
use crate::models::{GhmmParams, HmmParams, Model, Observation};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum PredictError {
    #[error("unsupported task {task}: {reason}; closest supported task is {closest}")]
    UnsupportedTask { task: String, reason: String, closest: String },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("degenerate posterior: {0}")]
    Degenerate(String),
}

/// Which time indices are predicted (as a tensor product, in order) and which are observed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskedTask {
    pub predicted: Vec<u32>,
    pub conditioned: Vec<u32>,
}

impl MaskedTask {
    pub fn new(predicted: &[u32], conditioned: &[u32]) -> Result<Self, PredictError> {
        let t = MaskedTask { predicted: predicted.to_vec(), conditioned: conditioned.to_vec() };
        t.check_well_formed()?;
        Ok(t)
    }

    /// Checks non-emptiness, index range and disjointness (not support).
    pub fn check_well_formed(&self) -> Result<(), PredictError> {
        if self.predicted.is_empty() || self.conditioned.is_empty() {
            return Err(PredictError::InvalidTask(format!("{self}: predicted and conditioned must be non-empty")));
        }
        let all = self.times();
        if all.contains(&0) {
            return Err(PredictError::InvalidTask(format!("{self}: time indices start at 1")));
        }
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != all.len() {
            return Err(PredictError::InvalidTask(format!("{self}: time indices must be distinct")));
        }
        Ok(())
    }

    /// All time indices, predicted first.
    pub fn times(&self) -> Vec<u32> {
        self.predicted.iter().chain(self.conditioned.iter()).copied().collect()
    }

    pub fn token_count(&self) -> usize {
        self.predicted.len() + self.conditioned.len()
    }

    /// True when some pair of the task's time indices is one step apart.
    pub fn has_adjacent_pair(&self) -> bool {
        let t = self.times();
        t.iter().any(|&a| t.iter().any(|&b| b == a + 1))
    }

    /// The hidden-state time that separates all tokens: the median time.
    pub fn anchor(&self) -> u32 {
        let mut t = self.times();
        t.sort_unstable();
        t[(t.len() - 1) / 2]
    }

    pub fn shape(&self) -> TaskShape {
        match (self.predicted.len(), self.conditioned.len()) {
            (1, 1) => TaskShape::Pairwise,
            (2, 1) => TaskShape::TwoGivenOne,
            (1, 2) => TaskShape::OneGivenTwo,
            _ => TaskShape::Other,
        }
    }

    /// Shifts every index by the same amount so the earliest is 1.
    pub fn normalized(&self) -> MaskedTask {
        let m = self.times().into_iter().min().unwrap_or(1);
        let f = |v: &Vec<u32>| v.iter().map(|t| t - m + 1).collect();
        MaskedTask { predicted: f(&self.predicted), conditioned: f(&self.conditioned) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskShape {
    Pairwise,
    TwoGivenOne,
    OneGivenTwo,
    Other,
}

impl fmt::Display for MaskedTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.predicted {
            write!(f, "x{t}")?;
        }
        f.write_str("|")?;
        for t in &self.conditioned {
            write!(f, "x{t}")?;
        }
        Ok(())
    }
}

impl FromStr for MaskedTask {
    type Err = PredictError;

    /// Parses the compact form `x2x3|x1` (spaces and `⊗`/`*` separators are ignored).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let cleaned: String = s.chars().filter(|c| !c.is_whitespace() && *c != '⊗' && *c != '*').collect();
        let (lhs, rhs) = cleaned
            .split_once('|')
            .ok_or_else(|| PredictError::InvalidTask(format!("'{s}': expected the form x2x3|x1")))?;
        let side = |part: &str| -> Result<Vec<u32>, PredictError> {
            let mut out = Vec::new();
            for tok in part.split(['x', 'X']).skip(1) {
                let t = tok
                    .parse::<u32>()
                    .map_err(|_| PredictError::InvalidTask(format!("'{s}': bad time index '{tok}'")))?;
                out.push(t);
            }
            if !part.is_empty() && !part.starts_with(['x', 'X']) {
                return Err(PredictError::InvalidTask(format!("'{s}': tokens must look like x<t>")));
            }
            Ok(out)
        };
        MaskedTask::new(&side(lhs)?, &side(rhs)?)
    }
}

/// Predictor output: a vector for single-token targets, a d x d matrix for tensor products
/// (rows index the first predicted token).
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Vector(Vector),
    Matrix(Mat),
}

impl Prediction {
    pub fn as_vector(&self) -> Option<&Vector> {
        match self {
            Prediction::Vector(v) => Some(v),
            Prediction::Matrix(_) => None,
        }
    }
    pub fn as_matrix(&self) -> Option<&Mat> {
        match self {
            Prediction::Matrix(m) => Some(m),
            Prediction::Vector(_) => None,
        }
    }
    /// Entries as a column matrix or the matrix itself.
    pub fn to_matrix(&self) -> Mat {
        match self {
            Prediction::Vector(v) => Mat::from_column_slice(v.len(), 1, v.as_slice()),
            Prediction::Matrix(m) => m.clone(),
        }
    }
    pub fn max_abs_diff(&self, other: &Prediction) -> f64 {
        let (a, b) = (self.to_matrix(), other.to_matrix());
        if a.shape() != b.shape() {
            return f64::INFINITY;
        }
        linalg::max_abs_diff(&a, &b)
    }
    pub fn sum(&self) -> f64 {
        match self {
            Prediction::Vector(v) => v.sum(),
            Prediction::Matrix(m) => m.sum(),
        }
    }
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Prediction::Vector(v) => serde_json::json!(v.iter().collect::<Vec<_>>()),
            Prediction::Matrix(m) => serde_json::json!(linalg::to_rows(m)),
        }
    }
}

// ---------------------------------------------------------------------------
// posteriors

/// `phi(x)_j = O[x, j] / sum_l O[x, l]` (uniform prior over hidden states).
pub fn posterior_discrete(p: &HmmParams, x: usize) -> Result<Vector, PredictError> {
    if x >= p.d() {
        return Err(PredictError::BadInput(format!("observation {x} out of range for d={}", p.d())));
    }
    let row = p.emission.row(x).transpose();
    let s = row.sum();
    if s <= 0.0 {
        return Err(PredictError::Degenerate(format!("emission row {x} sums to zero")));
    }
    Ok(row / s)
}

fn log_likelihoods(m: &Mat, x: &Vector) -> Vector {
    Vector::from_iterator(m.ncols(), m.column_iter().map(|mu| -0.5 * (x - mu).norm_squared()))
}

/// Softmax of `-||x - mu_i||^2 / 2`, stabilized by subtracting the maximum.
pub fn posterior_gaussian(p: &GhmmParams, x: &Vector) -> Vector {
    let l = log_likelihoods(&p.means, x);
    let mx = l.max();
    let e = l.map(|v| (v - mx).exp());
    let s = e.sum();
    e / s
}

/// Unnormalized likelihoods `psi_i(x) = exp(-||x - mu_i||^2 / 2)`.
pub fn gaussian_likelihood(p: &GhmmParams, x: &Vector) -> Vector {
    log_likelihoods(&p.means, x).map(f64::exp)
}

/// Jacobian of the Gaussian posterior, `(diag(phi) - phi phi^T)(M - [x..x])^T`, k x d.
pub fn posterior_jacobian(p: &GhmmParams, x: &Vector) -> Mat {
    let phi = posterior_gaussian(p, x);
    let s = Mat::from_diagonal(&phi) - &phi * phi.transpose();
    let mut diff = p.means.clone();
    for mut c in diff.column_iter_mut() {
        c -= x;
    }
    s * diff.transpose()
}

/// Posterior of a single observation under either model class.
pub fn posterior(model: &Model, obs: &Observation) -> Result<Vector, PredictError> {
    match (model, obs) {
        (Model::Hmm(p), Observation::Discrete(x)) => posterior_discrete(p, *x),
        (Model::Ghmm(p), Observation::Continuous(_)) => {
            let x = continuous_input(p.d(), obs)?;
            Ok(posterior_gaussian(p, &x))
        }
        (Model::Hmm(_), _) => Err(PredictError::BadInput("discrete model needs an integer observation".into())),
        (Model::Ghmm(_), _) => Err(PredictError::BadInput("Gaussian model needs a vector observation".into())),
    }
}

fn continuous_input(d: usize, obs: &Observation) -> Result<Vector, PredictError> {
    match obs {
        Observation::Continuous(v) if v.len() == d => Ok(Vector::from_column_slice(v)),
        Observation::Continuous(v) => Err(PredictError::BadInput(format!("vector of length {} for d={d}", v.len()))),
        Observation::Discrete(_) => Err(PredictError::BadInput("Gaussian model needs a vector observation".into())),
    }
}

// ---------------------------------------------------------------------------
// predictors

/// Hidden-state propagation `P(h_to | h_from)`: `T^n` forward, `(T^T)^n` backward.
pub fn propagation(t: &Mat, from: u32, to: u32) -> Mat {
    if to >= from {
        linalg::mat_pow(t, (to - from) as usize)
    } else {
        linalg::mat_pow(&t.transpose(), (from - to) as usize)
    }
}

/// `G * P(anchor -> time)`: column i is the expected observation at `time` given the hidden
/// state i at `anchor`.
pub fn token_factor(model: &Model, anchor: u32, time: u32) -> Mat {
    model.observation_matrix() * propagation(model.transition(), anchor, time)
}

fn closest_supported(task: &MaskedTask, gaussian: bool) -> MaskedTask {
    let mut pred: Vec<u32> = task.predicted.iter().take(2).copied().collect();
    let mut cond: Vec<u32> = task.conditioned.iter().take(1).copied().collect();
    if gaussian && task.shape() == TaskShape::OneGivenTwo {
        pred = vec![task.predicted[0], task.conditioned[1]];
        cond = vec![task.conditioned[0]];
    }
    if pred.is_empty() {
        pred.push(cond.first().map_or(2, |c| c + 1));
    }
    if cond.is_empty() {
        cond.push(1);
    }
    MaskedTask { predicted: pred, conditioned: cond }
}

/// Rejects tasks that no closed form here covers.
pub fn check_supported(model: &Model, task: &MaskedTask) -> Result<(), PredictError> {
    task.check_well_formed()?;
    let gaussian = matches!(model, Model::Ghmm(_));
    let reason = match task.shape() {
        TaskShape::Pairwise | TaskShape::TwoGivenOne => return Ok(()),
        TaskShape::OneGivenTwo if !gaussian => return Ok(()),
        TaskShape::OneGivenTwo => "the Gaussian one-given-two predictor is not implemented".to_string(),
        TaskShape::Other if task.token_count() > 3 => format!("{} tokens (at most 3 supported)", task.token_count()),
        TaskShape::Other => "unsupported predicted/conditioned split".to_string(),
    };
    Err(PredictError::UnsupportedTask {
        task: task.to_string(),
        reason,
        closest: closest_supported(task, gaussian).to_string(),
    })
}

/// Exact conditional expectation of the task target given the conditioned observations
/// (listed in the order of `task.conditioned`).
pub fn predict(model: &Model, task: &MaskedTask, inputs: &[Observation]) -> Result<Prediction, PredictError> {
    check_supported(model, task)?;
    if inputs.len() != task.conditioned.len() {
        return Err(PredictError::BadInput(format!(
            "task {task} conditions on {} tokens but {} inputs were given",
            task.conditioned.len(),
            inputs.len()
        )));
    }
    let a = task.anchor();
    match task.shape() {
        TaskShape::Pairwise => {
            let c = task.conditioned[0];
            let q = task.predicted[0];
            let phi = posterior(model, &inputs[0])?;
            Ok(Prediction::Vector(token_factor(model, c, q) * phi))
        }
        TaskShape::TwoGivenOne => {
            let c = task.conditioned[0];
            let phi = posterior(model, &inputs[0])?;
            let w = propagation(model.transition(), c, a) * phi;
            let f0 = token_factor(model, a, task.predicted[0]);
            let f1 = token_factor(model, a, task.predicted[1]);
            Ok(Prediction::Matrix(f0 * Mat::from_diagonal(&w) * f1.transpose()))
        }
        TaskShape::OneGivenTwo => {
            let Model::Hmm(p) = model else { unreachable!("rejected by check_supported") };
            let k = p.k();
            let mut w = Vector::from_element(k, 1.0);
            for (obs, &c) in inputs.iter().zip(task.conditioned.iter()) {
                let x = obs
                    .as_index()
                    .ok_or_else(|| PredictError::BadInput("discrete model needs an integer observation".into()))?;
                if x >= p.d() {
                    return Err(PredictError::BadInput(format!("observation {x} out of range for d={}", p.d())));
                }
                let lik = token_factor(model, a, c).row(x).transpose();
                w.component_mul_assign(&lik);
            }
            let s = w.sum();
            if s < 1e-300 {
                return Err(PredictError::Degenerate(format!("inputs {inputs:?} have zero probability under {task}")));
            }
            w /= s;
            Ok(Prediction::Vector(token_factor(model, a, task.predicted[0]) * w))
        }
        TaskShape::Other => unreachable!("rejected by check_supported"),
    }
}

/// Black-box access to an optimal predictor, as consumed by the recovery pipelines.
pub trait Oracle {
    fn task(&self) -> &MaskedTask;
    fn evaluate(&self, inputs: &[Observation]) -> Result<Prediction, PredictError>;
}

/// A model paired with a supported task.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorFn {
    pub model: Model,
    pub task: MaskedTask,
}

impl PredictorFn {
    pub fn new(model: Model, task: MaskedTask) -> Result<Self, PredictError> {
        check_supported(&model, &task)?;
        Ok(PredictorFn { model, task })
    }
}

impl Oracle for PredictorFn {
    fn task(&self) -> &MaskedTask {
        &self.task
    }
    fn evaluate(&self, inputs: &[Observation]) -> Result<Prediction, PredictError> {
        predict(&self.model, &self.task, inputs)
    }
}

/// `P(x_{t1} = i, x_{t2} = j)` under the stationary (uniform) start, rows indexed by `t1`.
pub fn joint_pair_distribution(p: &HmmParams, t1: u32, t2: u32) -> Result<Mat, PredictError> {
    if t1 >= t2 {
        return Err(PredictError::InvalidTask(format!("joint distribution needs t1 < t2, got {t1}, {t2}")));
    }
    let o = &p.emission;
    let g = linalg::mat_pow(&p.transition, (t2 - t1) as usize);
    Ok(o * (o * g).transpose() / p.k() as f64)
}

/// Density of `x_2` given `x_1`: `(2 pi)^{-d/2} psi(x2)^T T phi(x1)`.
pub fn conditional_density_ghmm(p: &GhmmParams, x1: &Vector, x2: &Vector) -> f64 {
    let norm = (2.0 * std::f64::consts::PI).powf(-(p.d() as f64) / 2.0);
    let phi = posterior_gaussian(p, x1);
    norm * gaussian_likelihood(p, x2).dot(&(&p.transition * phi))
}
