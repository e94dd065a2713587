//! Parameter recovery from optimal predictors.
//!
//! The three-token pipelines assemble a 3-tensor from oracle evaluations and decompose it.
//! Each mode's factor is (up to column scaling) `G * P(anchor -> t)`, where the anchor is the
//! middle time step, `G` the emission or means matrix and `P` the hidden-state propagation.
//! The factor at the anchor itself exposes `G`; a factor one step away exposes `T` or `T^T`.

use crate::linalg::{self, Mat, Vector};
use crate::models::{GhmmParams, HmmParams, Model, Observation};
use crate::predictors::{self, MaskedTask, Oracle, PredictError, Prediction, TaskShape};
use crate::seeding;
use crate::tensor_engine::{self, align_columns, jennrich, Tensor3, TensorError};
use itertools::Itertools;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum RecoveryError {
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("task {task} has no pair of adjacent tokens: predictor equality only constrains powers of T")]
    NonAdjacent { task: String },
    #[error("task {task} is not a {expected} task")]
    WrongTask { task: String, expected: String },
    #[error("inconsistent recovery: {0}")]
    Inconsistent(String),
    #[error("rank check failed: {0}")]
    RankCheck(String),
    #[error("no probe pair with distinct eigenvalue ratios after {attempts} attempts (last min gap {gap:.3e})")]
    Distinctness { attempts: usize, gap: f64 },
    #[error("sign resolution failed: {0}")]
    SignResolution(String),
    #[error("far-field outputs did not separate into {k} clusters (min separation {min_separation:.3e}); increase far_radius")]
    Concentration { k: usize, min_separation: f64 },
    #[error("ambiguous recovery: {0}")]
    Ambiguity(String),
    #[error("probe kernel ill-conditioned after {attempts} attempts (condition number {condition:.3e})")]
    Conditioning { attempts: usize, condition: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Outcome of a recovery pipeline.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryReport {
    pub method: String,
    pub recovered: Model,
    /// `permutation[j]` = recovered state matched to true state j (present after comparison).
    pub permutation: Option<Vec<usize>>,
    /// Frobenius error of the emission or means matrix after alignment.
    pub error_primary: Option<f64>,
    /// Frobenius error of the transition matrix after alignment.
    pub error_transition: Option<f64>,
    pub tensor_residual: Option<f64>,
    pub seed: u64,
    pub wall_ms: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl RecoveryReport {
    fn new(method: String, recovered: Model, seed: u64, started: Instant) -> Self {
        RecoveryReport {
            method,
            recovered,
            permutation: None,
            error_primary: None,
            error_transition: None,
            tensor_residual: None,
            seed,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            diagnostics: BTreeMap::new(),
        }
    }

    /// Aligns the recovered states to `truth` and fills in the error fields.
    pub fn compare_to(&mut self, truth: &Model) -> Result<(), RecoveryError> {
        if truth.kind() != self.recovered.kind() || truth.observation_matrix().shape() != self.recovered.observation_matrix().shape() {
            return Err(RecoveryError::InvalidInput("ground truth does not match the recovered model's class or shape".into()));
        }
        let al = align_columns(truth.observation_matrix(), self.recovered.observation_matrix(), false, false)?;
        let t = linalg::permute_square(self.recovered.transition(), &al.permutation);
        self.error_primary = Some(al.residual);
        self.error_transition = Some(linalg::frob_diff(truth.transition(), &t));
        self.permutation = Some(al.permutation);
        Ok(())
    }

    /// Largest of the available error fields.
    pub fn max_error(&self) -> Option<f64> {
        match (self.error_primary, self.error_transition) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        }
    }
}

/// Tolerances shared by the discrete pipelines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryOptions {
    /// Allowed negative entries and row/column-sum deviations of the recovered transition.
    pub consistency_tol: f64,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions { consistency_tol: 1e-6 }
    }
}

/// Where the conditioned token sits relative to the two predicted tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    ConditionedFirst,
    ConditionedMiddle,
    ConditionedLast,
}

impl Ordering {
    pub fn of(task: &MaskedTask) -> Option<Ordering> {
        if task.shape() != TaskShape::TwoGivenOne {
            return None;
        }
        let c = task.conditioned[0];
        let (p0, p1) = (task.predicted[0], task.predicted[1]);
        Some(if c < p0.min(p1) {
            Ordering::ConditionedFirst
        } else if c > p0.max(p1) {
            Ordering::ConditionedLast
        } else {
            Ordering::ConditionedMiddle
        })
    }
    pub fn tag(self) -> &'static str {
        match self {
            Ordering::ConditionedFirst => "conditioned-first",
            Ordering::ConditionedMiddle => "conditioned-middle",
            Ordering::ConditionedLast => "conditioned-last",
        }
    }
}

fn require_shape(task: &MaskedTask, shape: TaskShape, expected: &str) -> Result<(), RecoveryError> {
    task.check_well_formed()?;
    if task.shape() != shape {
        return Err(RecoveryError::WrongTask { task: task.to_string(), expected: expected.into() });
    }
    if !task.has_adjacent_pair() {
        return Err(RecoveryError::NonAdjacent { task: task.to_string() });
    }
    Ok(())
}

/// `T` from a propagation matrix `P(from -> to)` when the two times are adjacent.
fn transition_from_propagation(p: &Mat, from: u32, to: u32) -> Option<Mat> {
    if to == from + 1 {
        Some(p.clone())
    } else if from == to + 1 {
        Some(p.transpose())
    } else {
        None
    }
}

fn expect_matrix(p: Prediction, d: usize) -> Result<Mat, RecoveryError> {
    match p {
        Prediction::Matrix(m) if m.shape() == (d, d) => Ok(m),
        _ => Err(RecoveryError::InvalidInput(format!("oracle must return a {d}x{d} matrix"))),
    }
}

fn expect_vector(p: Prediction, d: usize) -> Result<Vector, RecoveryError> {
    match p {
        Prediction::Vector(v) if v.len() == d => Ok(v),
        _ => Err(RecoveryError::InvalidInput(format!("oracle must return a length-{d} vector"))),
    }
}

fn check_transition(t: &Mat, tol: f64) -> Result<(), RecoveryError> {
    let neg = -t.min();
    if neg > tol {
        return Err(RecoveryError::Inconsistent(format!("recovered transition has entry {:.3e}", -neg)));
    }
    let dev = linalg::column_sums(t)
        .into_iter()
        .chain(linalg::row_sums(t))
        .fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
    if dev > tol {
        return Err(RecoveryError::Inconsistent(format!("recovered transition sums deviate from 1 by {dev:.3e}")));
    }
    if linalg::numerical_rank(t, linalg::RANK_RTOL) < t.ncols() {
        return Err(RecoveryError::Inconsistent("recovered transition is rank deficient".into()));
    }
    Ok(())
}

/// One decomposed mode of a discrete recovery tensor.
struct ModeFactor {
    factor: Mat,
    time: u32,
    /// The factor carries the row scaling `D^-1` of posterior-weighted basis probes.
    row_normalized: bool,
}

/// Turns decomposed factors into (O, T) using the anchor structure described in the module docs.
fn finish_discrete(modes: &[ModeFactor], anchor: u32, tol: f64) -> Result<(HmmParams, BTreeMap<String, f64>), RecoveryError> {
    let mut diag = BTreeMap::new();
    let ia = modes
        .iter()
        .position(|m| m.time == anchor)
        .ok_or_else(|| RecoveryError::InvalidInput("no mode at the anchor time".into()))?;
    let plain = |m: &ModeFactor| linalg::normalize_column_sums(&m.factor);
    // Row sums of any unweighted factor O*P equal the row sums of O (P doubly stochastic).
    let row_scale = || -> Result<Vector, RecoveryError> {
        let other = modes
            .iter()
            .find(|m| !m.row_normalized)
            .ok_or_else(|| RecoveryError::InvalidInput("no unweighted mode to fix the row scaling".into()))?;
        Ok(Vector::from_vec(linalg::row_sums(&plain(other))))
    };
    let o = if modes[ia].row_normalized {
        let dvec = row_scale()?;
        linalg::normalize_column_sums(&(Mat::from_diagonal(&dvec) * &modes[ia].factor))
    } else {
        plain(&modes[ia])
    };
    let o_pinv = linalg::pinv(&o);
    let mut transition = None;
    for (i, m) in modes.iter().enumerate() {
        if i == ia {
            continue;
        }
        let p = if m.row_normalized {
            let dvec = Vector::from_vec(linalg::row_sums(&o));
            let scaled = Mat::from_diagonal(&dvec.map(|v| 1.0 / v)) * &o;
            linalg::normalize_column_sums(&(linalg::pinv(&scaled) * &m.factor))
        } else {
            &o_pinv * plain(m)
        };
        if transition.is_none() {
            if let Some(t) = transition_from_propagation(&p, anchor, m.time) {
                diag.insert("transition_mode_time".into(), m.time as f64);
                transition = Some(t);
            }
        }
    }
    let t = transition.ok_or_else(|| RecoveryError::NonAdjacent { task: format!("anchor x{anchor}") })?;
    check_transition(&t, tol)?;
    let min_entry = o.min();
    if min_entry < -tol {
        return Err(RecoveryError::Inconsistent(format!("recovered emission has entry {min_entry:.3e}")));
    }
    diag.insert("transition_min_entry".into(), t.min());
    Ok((HmmParams { emission: o, transition: t }, diag))
}

/// Recovery from the `x_{t2} ⊗ x_{t3} | x_{t1}` predictor (any ordering of the three times,
/// at least one adjacent pair). The tensor is the unweighted basis sum
/// `W = sum_j e_j ⊗ oracle(e_j)`.
pub fn recover_hmm_two_given_one(oracle: &dyn Oracle, d: usize, k: usize, seed: u64, opts: RecoveryOptions) -> Result<RecoveryReport, RecoveryError> {
    let started = Instant::now();
    let task = oracle.task().clone();
    require_shape(&task, TaskShape::TwoGivenOne, "two-given-one")?;
    if k > d {
        return Err(RecoveryError::InvalidInput(format!("k={k} exceeds d={d}")));
    }
    let ordering = Ordering::of(&task).expect("two-given-one");
    let mut w = Tensor3::zeros([d, d, d]);
    for j in 0..d {
        let f = expect_matrix(oracle.evaluate(&[Observation::Discrete(j)])?, d)?;
        w.add_vector_matrix(1.0, &Vector::from_fn(d, |i, _| if i == j { 1.0 } else { 0.0 }), &f);
    }
    let cpd = jennrich(&w, k, seed)?;
    let modes = [
        ModeFactor { factor: cpd.a.clone(), time: task.conditioned[0], row_normalized: true },
        ModeFactor { factor: cpd.b.clone(), time: task.predicted[0], row_normalized: false },
        ModeFactor { factor: cpd.c.clone(), time: task.predicted[1], row_normalized: false },
    ];
    let (params, mut diag) = finish_discrete(&modes, task.anchor(), opts.consistency_tol)?;
    diag.insert("eigengap".into(), cpd.eigengap);
    diag.insert("jennrich_retries".into(), cpd.retries as f64);
    let mut report = RecoveryReport::new(format!("hmm_two_given_one/{}", ordering.tag()), Model::Hmm(params), seed, started);
    report.tensor_residual = Some(cpd.residual);
    report.diagnostics = diag;
    Ok(report)
}

const PROBE_RESAMPLES: usize = 20;
const DISTINCT_GAP: f64 = 1e-6;

/// Recovery for d = k from two evaluations of the two-given-one predictor: the eigenvectors of
/// `W1 W2^-1` and of `(W1^-1 W2)^T` are the two predicted-token factors, paired through
/// reciprocal eigenvalues. The conditioned token must not sit between the predicted ones.
pub fn recover_hmm_eigen_pair(
    oracle: &dyn Oracle,
    probes: Option<(usize, usize)>,
    d: usize,
    k: usize,
    seed: u64,
    opts: RecoveryOptions,
) -> Result<RecoveryReport, RecoveryError> {
    let started = Instant::now();
    let task = oracle.task().clone();
    require_shape(&task, TaskShape::TwoGivenOne, "two-given-one")?;
    if d != k {
        return Err(RecoveryError::InvalidInput(format!("eigen-pair recovery needs d = k, got d={d}, k={k}")));
    }
    if d < 2 {
        return Err(RecoveryError::InvalidInput("eigen-pair recovery needs at least two observation symbols".into()));
    }
    let ordering = Ordering::of(&task).expect("two-given-one");
    if ordering == Ordering::ConditionedMiddle {
        return Err(RecoveryError::WrongTask {
            task: task.to_string(),
            expected: "two-given-one with the conditioned token outside the predicted pair".into(),
        });
    }
    let anchor = task.anchor();
    let mut rng = seeding::derived_rng(seed, 0);
    let mut pair = probes.unwrap_or((0, 1));
    let mut last_gap = 0.0;
    let mut rank_failures = 0;
    for attempt in 0..=PROBE_RESAMPLES {
        if attempt > 0 || probes.is_none() {
            let a = rng.random_range(0..d);
            pair = (a, (a + rng.random_range(1..d)) % d);
        }
        let w1 = expect_matrix(oracle.evaluate(&[Observation::Discrete(pair.0)])?, d)?;
        let w2 = expect_matrix(oracle.evaluate(&[Observation::Discrete(pair.1)])?, d)?;
        if linalg::inverse_condition(&w1) < 1e-10 || linalg::inverse_condition(&w2) < 1e-10 {
            rank_failures += 1;
            continue;
        }
        let (w1i, w2i) = (w1.clone().try_inverse().unwrap(), w2.clone().try_inverse().unwrap());
        let e0 = linalg::real_eigen(&(&w1 * &w2i));
        let e1 = linalg::real_eigen(&(&w1i * &w2).transpose());
        if e0.imag_mass > 1e-8 || e1.imag_mass > 1e-8 {
            last_gap = 0.0;
            continue;
        }
        last_gap = linalg::relative_min_gap(&e0.values);
        if last_gap < DISTINCT_GAP {
            continue;
        }
        let perm: Option<Vec<usize>> = e0
            .values
            .iter()
            .map(|&l| {
                e1.values
                    .iter()
                    .enumerate()
                    .map(|(j, &m)| (j, (l * m - 1.0).abs()))
                    .min_by(|x, y| x.1.total_cmp(&y.1))
                    .filter(|(_, e)| *e <= 1e-6)
                    .map(|(j, _)| j)
            })
            .collect();
        let Some(perm) = perm.filter(|p| p.iter().unique().count() == p.len()) else {
            continue;
        };
        let modes = [
            ModeFactor { factor: e0.vectors.clone(), time: task.predicted[0], row_normalized: false },
            ModeFactor { factor: linalg::permute_columns(&e1.vectors, &perm), time: task.predicted[1], row_normalized: false },
        ];
        let (params, mut diag) = finish_discrete(&modes, anchor, opts.consistency_tol)?;
        diag.insert("probe_a".into(), pair.0 as f64);
        diag.insert("probe_b".into(), pair.1 as f64);
        diag.insert("ratio_min_gap".into(), last_gap);
        diag.insert("probe_attempts".into(), (attempt + 1) as f64);
        let mut report = RecoveryReport::new(format!("hmm_eigen_pair/{}", ordering.tag()), Model::Hmm(params), seed, started);
        report.diagnostics = diag;
        return Ok(report);
    }
    if rank_failures == PROBE_RESAMPLES + 1 {
        return Err(RecoveryError::RankCheck(
            "every probe evaluation is rank deficient (emission or transition is not full rank)".into(),
        ));
    }
    Err(RecoveryError::Distinctness { attempts: PROBE_RESAMPLES + 1, gap: last_gap })
}

/// Recovery from the `x_{t3} | x_{t1} ⊗ x_{t2}` predictor with the tensor
/// `W = sum_{i,j} joint[i,j] e_i ⊗ e_j ⊗ oracle(e_i, e_j)`. `joint` holds
/// `P(x_{c0} = i, x_{c1} = j)` for the task's conditioned times in the listed order.
pub fn recover_hmm_one_given_two(
    oracle: &dyn Oracle,
    joint: &Mat,
    d: usize,
    k: usize,
    seed: u64,
    opts: RecoveryOptions,
) -> Result<RecoveryReport, RecoveryError> {
    let started = Instant::now();
    let task = oracle.task().clone();
    require_shape(&task, TaskShape::OneGivenTwo, "one-given-two")?;
    if joint.shape() != (d, d) {
        return Err(RecoveryError::InvalidInput(format!("joint must be {d}x{d}")));
    }
    if joint.min() < 0.0 || (joint.sum() - 1.0).abs() > 1e-9 {
        return Err(RecoveryError::InvalidInput("joint must be nonnegative and sum to 1".into()));
    }
    let mut w = Tensor3::zeros([d, d, d]);
    for i in 0..d {
        for j in 0..d {
            let p = joint[(i, j)];
            if p == 0.0 {
                continue;
            }
            let f = expect_vector(oracle.evaluate(&[Observation::Discrete(i), Observation::Discrete(j)])?, d)?;
            let e = |n: usize| Vector::from_fn(d, |r, _| if r == n { 1.0 } else { 0.0 });
            w.add_outer(p, &e(i), &e(j), &f);
        }
    }
    let cpd = jennrich(&w, k, seed)?;
    let modes = [
        ModeFactor { factor: cpd.a.clone(), time: task.conditioned[0], row_normalized: false },
        ModeFactor { factor: cpd.b.clone(), time: task.conditioned[1], row_normalized: false },
        ModeFactor { factor: cpd.c.clone(), time: task.predicted[0], row_normalized: false },
    ];
    let (params, mut diag) = finish_discrete(&modes, task.anchor(), opts.consistency_tol)?;
    diag.insert("eigengap".into(), cpd.eigengap);
    let mut report = RecoveryReport::new("hmm_one_given_two".into(), Model::Hmm(params), seed, started);
    report.tensor_residual = Some(cpd.residual);
    report.diagnostics = diag;
    Ok(report)
}

/// Empirical `P(x_{t1}, x_{t2})` from a sampled sequence (pairs at distance `t2 - t1`).
pub fn empirical_joint(obs: &[usize], d: usize, t1: u32, t2: u32) -> Result<Mat, RecoveryError> {
    if t2 <= t1 {
        return Err(RecoveryError::InvalidInput("empirical joint needs t1 < t2".into()));
    }
    let g = (t2 - t1) as usize;
    if obs.len() <= g {
        return Err(RecoveryError::InvalidInput("sequence shorter than the gap".into()));
    }
    let mut m = Mat::zeros(d, d);
    for w in obs.windows(g + 1) {
        m[(w[0], w[g])] += 1.0;
    }
    let n = m.sum();
    Ok(m / n)
}

// ---------------------------------------------------------------------------
// Gaussian pipelines

fn continuous(v: &Vector) -> Observation {
    Observation::Continuous(v.iter().copied().collect())
}

fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vector {
    Vector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Probe settings for the Gaussian three-token pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct GhmmProbeOptions {
    /// Maximum number of probe sets tried before giving up.
    pub probe_budget: usize,
    /// First probe set to try (k vectors); random sets follow if it fails the rank check.
    pub initial_probes: Option<Vec<Vector>>,
    pub consistency_tol: f64,
}

impl Default for GhmmProbeOptions {
    fn default() -> Self {
        GhmmProbeOptions { probe_budget: 20, initial_probes: None, consistency_tol: 1e-6 }
    }
}

/// Largest entrywise mismatch between the oracle and a candidate model on `probes`.
fn oracle_mismatch(oracle: &dyn Oracle, candidate: &Model, probes: &[Vector]) -> Result<f64, RecoveryError> {
    let mut worst = 0.0f64;
    for x in probes {
        let obs = [continuous(x)];
        let want = oracle.evaluate(&obs)?;
        let got = predictors::predict(candidate, oracle.task(), &obs)?;
        worst = worst.max(want.max_abs_diff(&got));
    }
    Ok(worst)
}

/// The two unit-norm mean configurations with the given differences `mu_j - mu_0`
/// (`deltas` column 0 is zero) whose common offset lies in the span of `basis`
/// (orthonormal columns). They are mirror images under a Householder reflection.
fn unit_norm_candidates(deltas: &Mat, basis: &Mat) -> Result<[Mat; 2], RecoveryError> {
    let k = deltas.ncols();
    let u_t = basis.transpose();
    let a = Mat::from_fn(k - 1, basis.ncols(), |r, c| 2.0 * (&u_t * deltas.column(r + 1))[c]);
    let b = Vector::from_fn(k - 1, |r, _| -deltas.column(r + 1).norm_squared());
    let y_p = linalg::pinv(&a) * &b;
    let n = linalg::null_vector(&Mat::from_fn(k, basis.ncols(), |r, c| if r < k - 1 { a[(r, c)] } else { 0.0 }));
    let rem = 1.0 - y_p.norm_squared();
    if rem < -1e-8 {
        return Err(RecoveryError::Inconsistent(format!("no unit-norm configuration fits the mean differences (residual {rem:.3e})")));
    }
    let s = rem.max(0.0).sqrt();
    let build = |y: Vector| {
        let mu0 = basis * y;
        let mut m = deltas.clone();
        for mut c in m.column_iter_mut() {
            c += &mu0;
        }
        m
    };
    Ok([build(&y_p + &n * s), build(&y_p - &n * s)])
}

/// Fits `log phi_j(x) - log phi_0(x) = delta_j . x + c_j` and returns (deltas, max |c_j|).
fn fit_log_ratios(points: &[Vector], phis: &[Vector]) -> Result<(Mat, f64), RecoveryError> {
    let d = points[0].len();
    let k = phis[0].len();
    let n = points.len();
    let design = Mat::from_fn(n, d + 1, |r, c| if c < d { points[r][c] } else { 1.0 });
    let dp = linalg::pinv(&design);
    let mut deltas = Mat::zeros(d, k);
    let mut worst_c = 0.0f64;
    for j in 1..k {
        let mut rhs = Vector::zeros(n);
        for (r, phi) in phis.iter().enumerate() {
            if phi[j] <= 0.0 || phi[0] <= 0.0 {
                return Err(RecoveryError::Inconsistent("non-positive recovered posterior".into()));
            }
            rhs[r] = phi[j].ln() - phi[0].ln();
        }
        let sol = &dp * rhs;
        for i in 0..d {
            deltas[(i, j)] = sol[i];
        }
        worst_c = worst_c.max(sol[d].abs());
    }
    Ok((deltas, worst_c))
}

fn sign_vectors(k: usize) -> impl Iterator<Item = Vec<f64>> {
    (0..(1u32 << k)).map(move |mask| (0..k).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect())
}

fn stochastic_columns(p: &Mat, tol: f64) -> bool {
    p.min() >= -1e-8 && linalg::column_sums(p).iter().all(|s| (s - 1.0).abs() <= tol)
}

/// Recovery from the Gaussian `x_a ⊗ x_b | x_c` predictor: `W = sum_x x ⊗ oracle(x)` over
/// k random probes, decomposed with r = k. Means are fixed by unit norms; column signs are
/// chosen so that the transition is stochastic and the candidate reproduces the oracle.
pub fn recover_ghmm_two_given_one(oracle: &dyn Oracle, d: usize, k: usize, seed: u64, opts: &GhmmProbeOptions) -> Result<RecoveryReport, RecoveryError> {
    let started = Instant::now();
    let task = oracle.task().clone();
    require_shape(&task, TaskShape::TwoGivenOne, "two-given-one")?;
    if k > d || k > 8 {
        return Err(RecoveryError::InvalidInput(format!("need k <= d and k <= 8, got d={d}, k={k}")));
    }
    let ordering = Ordering::of(&task).expect("two-given-one");
    let mut rng = seeding::derived_rng(seed, 1);
    let mut probes = opts.initial_probes.clone().unwrap_or_default();
    let mut attempts = 0;
    let (w, x) = loop {
        if probes.len() != k || attempts > 0 {
            probes = (0..k).map(|_| gaussian_vector(&mut rng, d, 1.0)).collect();
        }
        attempts += 1;
        if probes.iter().any(|p| p.len() != d) {
            return Err(RecoveryError::InvalidInput(format!("probes must have length {d}")));
        }
        let mut w = Tensor3::zeros([d, d, d]);
        for p in &probes {
            let f = expect_matrix(oracle.evaluate(&[continuous(p)])?, d)?;
            w.add_vector_matrix(1.0, p, &f);
        }
        let x = Mat::from_columns(&probes);
        let s = linalg::singular_values(&w.unfold(1));
        if s.len() >= k && s[0] > 0.0 && s[k - 1] / s[0] >= 1e-6 && linalg::inverse_condition(&x) >= 1e-6 {
            break (w, x);
        }
        if attempts >= opts.probe_budget.max(1) {
            return Err(RecoveryError::RankCheck(format!("mode-1 factor rank below {k} after {attempts} probe sets")));
        }
    };
    let cpd = jennrich(&w, k, seed)?;
    // Mode-1 factor is X Q diag(1/z) with Q[x, i] = P(h_anchor = i | x), rows summing to 1.
    let q_hat = linalg::pinv(&x) * &cpd.a;
    let z = linalg::pinv(&q_hat) * Vector::from_element(k, 1.0);
    let q = &q_hat * Mat::from_diagonal(&z);
    let anchor = task.anchor();
    let c_time = task.conditioned[0];
    let (b_time, c3_time) = (task.predicted[0], task.predicted[1]);
    let tol = opts.consistency_tol;

    let mut candidates: Vec<GhmmParams> = Vec::new();
    let mut diag = BTreeMap::new();
    if anchor != c_time {
        let (fa, fo, other_time) = if anchor == b_time { (&cpd.b, &cpd.c, c3_time) } else { (&cpd.c, &cpd.b, b_time) };
        let mags: Vec<f64> = fa.column_iter().map(|c| c.norm()).collect();
        for sigma in sign_vectors(k) {
            let t_sc: Vec<f64> = mags.iter().zip(&sigma).map(|(m, s)| m * s).collect();
            let m = Mat::from_fn(d, k, |i, j| fa[(i, j)] / t_sc[j]);
            let g_o = Mat::from_fn(d, k, |i, j| fo[(i, j)] * t_sc[j] / z[j]);
            let p_o = linalg::pinv(&m) * g_o;
            if !stochastic_columns(&p_o, tol) {
                continue;
            }
            let t = match transition_from_propagation(&p_o, anchor, other_time) {
                Some(t) => t,
                None => {
                    let params = GhmmParams { means: m.clone(), transition: Mat::identity(k, k) };
                    let phis = Mat::from_columns(&probes.iter().map(|p| predictors::posterior_gaussian(&params, p)).collect::<Vec<_>>());
                    let Some(phi_inv) = phis.try_inverse() else { continue };
                    let p_c = q.transpose() * phi_inv;
                    match transition_from_propagation(&p_c, c_time, anchor) {
                        Some(t) => t,
                        None => continue,
                    }
                }
            };
            candidates.push(GhmmParams { means: m, transition: t });
        }
    } else {
        // Conditioned token at the anchor: posteriors are observable through the rank-one
        // terms, which pins down the mean differences.
        let kmat = Mat::from_fn(d * d, k, |r, i| cpd.b[(r / d, i)] * cpd.c[(r % d, i)]);
        let kp = linalg::pinv(&kmat);
        let mut points: Vec<Vector> = probes.clone();
        let mut phis: Vec<Vector> = (0..k).map(|r| q.row(r).transpose()).collect();
        for _ in 0..(d + 5) {
            let y = gaussian_vector(&mut rng, d, 1.0);
            let f = expect_matrix(oracle.evaluate(&[continuous(&y)])?, d)?;
            let coef = &kp * Vector::from_column_slice(f.transpose().as_slice());
            let phi = coef.component_mul(&z);
            let s = phi.sum();
            points.push(y);
            phis.push(phi / s);
        }
        let (deltas, c_max) = fit_log_ratios(&points, &phis)?;
        diag.insert("log_ratio_constant_max".into(), c_max);
        if c_max > 1e-6 {
            return Err(RecoveryError::Inconsistent(format!("log-ratio constant {c_max:.3e}: mean norms are not equal")));
        }
        let basis = top_left(&cpd.b, k);
        for m in unit_norm_candidates(&deltas, &basis)? {
            let mp = linalg::pinv(&m);
            let p3 = linalg::normalize_column_sums(&(&mp * &cpd.c));
            let p2 = linalg::normalize_column_sums(&(&mp * &cpd.b));
            if !stochastic_columns(&p3, tol) || !stochastic_columns(&p2, tol) {
                continue;
            }
            let t = transition_from_propagation(&p3, anchor, c3_time).or_else(|| transition_from_propagation(&p2, anchor, b_time));
            let Some(t) = t else { continue };
            candidates.push(GhmmParams { means: m, transition: t });
        }
    }
    let mut accepted: Vec<(GhmmParams, f64)> = Vec::new();
    let mut check_points = probes.clone();
    check_points.extend((0..k).map(|_| gaussian_vector(&mut rng, d, 1.0)));
    let scale = check_points
        .iter()
        .map(|p| oracle.evaluate(&[continuous(p)]).map(|f| linalg::max_abs(&f.to_matrix())))
        .collect::<Result<Vec<f64>, _>>()?
        .into_iter()
        .fold(0.0f64, f64::max);
    for cand in candidates {
        if check_transition(&cand.transition, tol).is_err() {
            continue;
        }
        let mism = oracle_mismatch(oracle, &Model::Ghmm(cand.clone()), &check_points)?;
        if mism <= 1e-6 * scale.max(1.0) {
            accepted.push((cand, mism));
        }
    }
    let Some((best, mism)) = accepted.first().cloned() else {
        return Err(RecoveryError::SignResolution("no sign/reflection choice gives a stochastic transition reproducing the oracle".into()));
    };
    for (other, _) in accepted.iter().skip(1) {
        let al = align_columns(&best.means, &other.means, false, false)?;
        if al.residual > 1e-6 {
            return Err(RecoveryError::Ambiguity(format!(
                "{} distinct mean configurations reproduce the oracle (e.g. a Householder-reflected pair)",
                accepted.len()
            )));
        }
    }
    diag.insert("oracle_mismatch".into(), mism);
    diag.insert("probe_sets".into(), attempts as f64);
    diag.insert("eigengap".into(), cpd.eigengap);
    let mut report = RecoveryReport::new(format!("ghmm_two_given_one/{}", ordering.tag()), Model::Ghmm(best), seed, started);
    report.tensor_residual = Some(cpd.residual);
    report.diagnostics = diag;
    Ok(report)
}

fn top_left(m: &Mat, r: usize) -> Mat {
    let svd = m.clone().svd(true, false);
    let u = svd.u.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    Mat::from_fn(m.nrows(), r, |i, j| u[(i, order[j])])
}

/// Settings for the far-field pairwise pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseOptions {
    pub far_radius: f64,
    /// Number of far-field directions; `None` means 200 * k.
    pub n_directions: Option<usize>,
}

impl Default for PairwiseOptions {
    fn default() -> Self {
        PairwiseOptions { far_radius: 1e3, n_directions: None }
    }
}

const KMEANS_ITERATIONS: usize = 50;

const DUPLICATE_TOL: f64 = 1e-8;

/// Seeds from the k most populated groups of near-identical points (far-field outputs of a
/// single state agree to machine precision), then Lloyd refinement. Returns the assignment,
/// or `None` when fewer than k repeated values exist.
fn cluster(points: &[Vector], k: usize) -> Option<Vec<usize>> {
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        match groups.iter_mut().find(|(rep, _)| (&points[*rep] - p).amax() <= DUPLICATE_TOL) {
            Some(g) => g.1 += 1,
            None => groups.push((i, 1)),
        }
    }
    groups.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    if groups.len() < k || groups[k - 1].1 < 2 {
        return None;
    }
    let mut centers: Vec<Vector> = groups[..k].iter().map(|(rep, _)| points[*rep].clone()).collect();
    let mut assign = vec![0usize; points.len()];
    for _ in 0..KMEANS_ITERATIONS {
        for (i, p) in points.iter().enumerate() {
            assign[i] = (0..k).min_by(|&a, &b| (p - &centers[a]).norm_squared().total_cmp(&(p - &centers[b]).norm_squared())).unwrap();
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vector> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                *center = members.iter().fold(Vector::zeros(center.len()), |acc, p| acc + *p) / members.len() as f64;
            }
        }
    }
    Some(assign)
}

fn coordinate_median(points: &[&Vector]) -> Vector {
    let d = points[0].len();
    Vector::from_fn(d, |i, _| {
        let mut v: Vec<f64> = points.iter().map(|p| p[i]).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    })
}

/// Constructive recovery from the Gaussian pairwise predictor `x_b | x_a` with |b - a| = 1.
///
/// Far-field probes expose the columns of `M P` (P = T or T^T); posteriors then follow from
/// `pinv(M P)`, their log-ratios give the mean differences, the unit-norm constraint leaves a
/// mean configuration and its Householder reflection, and only the former yields a
/// stochastic transition.
pub fn recover_ghmm_pairwise(oracle: &dyn Oracle, d: usize, k: usize, seed: u64, opts: PairwiseOptions) -> Result<RecoveryReport, RecoveryError> {
    let started = Instant::now();
    let task = oracle.task().clone();
    require_shape(&task, TaskShape::Pairwise, "pairwise")?;
    let (c_time, p_time) = (task.conditioned[0], task.predicted[0]);
    let mut rng = seeding::derived_rng(seed, 2);
    let mut diag = BTreeMap::new();
    if k == 1 {
        let mu = expect_vector(oracle.evaluate(&[continuous(&Vector::zeros(d))])?, d)?;
        let m = Mat::from_column_slice(d, 1, mu.as_slice());
        let report = RecoveryReport::new("ghmm_pairwise".into(), Model::Ghmm(GhmmParams { means: m, transition: Mat::identity(1, 1) }), seed, started);
        return Ok(report);
    }
    let n_dir = opts.n_directions.unwrap_or(200 * k).max(k);
    let mut outs = Vec::with_capacity(n_dir);
    for _ in 0..n_dir {
        let v = gaussian_vector(&mut rng, d, 1.0);
        let v = &v / v.norm();
        outs.push(expect_vector(oracle.evaluate(&[continuous(&(v * opts.far_radius))])?, d)?);
    }
    let assign = cluster(&outs, k).ok_or(RecoveryError::Concentration { k, min_separation: 0.0 })?;
    let mut centers = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<&Vector> = outs.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            return Err(RecoveryError::Concentration { k, min_separation: 0.0 });
        }
        // Directions near a cell boundary give mixtures; the median ignores them.
        centers.push(coordinate_median(&members));
    }
    let mut min_sep = f64::INFINITY;
    for (a, b) in (0..k).tuple_combinations() {
        min_sep = min_sep.min((&centers[a] - &centers[b]).norm());
    }
    diag.insert("center_min_separation".into(), min_sep);
    if min_sep < 1e-3 {
        return Err(RecoveryError::Concentration { k, min_separation: min_sep });
    }
    let mp = Mat::from_columns(&centers);
    let mp_pinv = linalg::pinv(&mp);
    let mut points = Vec::new();
    let mut phis = Vec::new();
    let mut tries = 0;
    while points.len() < d + 5 {
        tries += 1;
        if tries > 100 * (d + 5) {
            return Err(RecoveryError::Inconsistent("could not find probes with positive posteriors".into()));
        }
        let x = gaussian_vector(&mut rng, d, 1.0);
        let f = expect_vector(oracle.evaluate(&[continuous(&x)])?, d)?;
        let phi = &mp_pinv * f;
        let s = phi.sum();
        let phi = phi / s;
        if phi.min() <= 1e-12 {
            continue;
        }
        points.push(x);
        phis.push(phi);
    }
    let (deltas, c_max) = fit_log_ratios(&points, &phis)?;
    diag.insert("log_ratio_constant_max".into(), c_max);
    if c_max > 1e-6 {
        return Err(RecoveryError::Inconsistent(format!("log-ratio constant {c_max:.3e}: mean norms are not equal")));
    }
    let basis = top_left(&mp, k);
    let cands = unit_norm_candidates(&deltas, &basis)?;
    let mut kept = Vec::new();
    let mut rejected_dev = Vec::new();
    for m in cands {
        let p = linalg::pinv(&m) * &mp;
        let sums = linalg::column_sums(&p);
        let dev_plus = sums.iter().fold(0.0f64, |a, s| a.max((s - 1.0).abs()));
        let dev_minus = sums.iter().fold(0.0f64, |a, s| a.max((s + 1.0).abs()));
        if dev_plus <= 1e-6 && p.min() >= -1e-8 {
            kept.push((m, p));
        } else {
            rejected_dev.push(dev_minus);
        }
    }
    if kept.len() != 1 {
        return Err(RecoveryError::Ambiguity(format!("{} of 2 mean candidates give a stochastic transition", kept.len())));
    }
    let rej = rejected_dev[0];
    diag.insert("rejected_colsum_dev_from_minus_one".into(), rej);
    if rej > 1e-6 {
        return Err(RecoveryError::Inconsistent(format!("rejected candidate's column sums deviate from -1 by {rej:.3e}")));
    }
    let (m, p) = kept.pop().unwrap();
    let t = transition_from_propagation(&p, c_time, p_time).expect("adjacency checked");
    check_transition(&t, 1e-6)?;
    let mut report = RecoveryReport::new("ghmm_pairwise".into(), Model::Ghmm(GhmmParams { means: m, transition: t }), seed, started);
    report.diagnostics = diag;
    Ok(report)
}

/// Pairwise conditional density oracle `p(x2 | x1)`.
pub trait DensityOracle {
    fn density(&self, x1: &Vector, x2: &Vector) -> f64;
}

impl<F: Fn(&Vector, &Vector) -> f64> DensityOracle for F {
    fn density(&self, x1: &Vector, x2: &Vector) -> f64 {
        self(x1, x2)
    }
}

impl DensityOracle for GhmmParams {
    fn density(&self, x1: &Vector, x2: &Vector) -> f64 {
        predictors::conditional_density_ghmm(self, x1, x2)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityRecovery {
    pub transition: Mat,
    /// Condition number of the probe kernel matrix.
    pub condition: f64,
    pub resamples: usize,
    /// Largest change made by clipping and renormalization.
    pub perturbation: f64,
}

const KERNEL_MAX_CONDITION: f64 = 1e6;

/// Recovers T from the pairwise conditional density given the means, by solving
/// `Psi^T T Phi = (2 pi)^{d/2} G` on a k x k probe grid.
pub fn recover_t_from_conditional_density(oracle: &dyn DensityOracle, means: &Mat, seed: u64) -> Result<DensityRecovery, RecoveryError> {
    let (d, k) = means.shape();
    if k == 1 {
        return Ok(DensityRecovery { transition: Mat::identity(1, 1), condition: 1.0, resamples: 0, perturbation: 0.0 });
    }
    let model = GhmmParams { means: means.clone(), transition: Mat::identity(k, k) };
    let centroid = means.column_mean();
    let mut rng = seeding::derived_rng(seed, 3);
    let mut condition = f64::INFINITY;
    for attempt in 0..=PROBE_RESAMPLES {
        let probes: Vec<Vector> = (0..k)
            .map(|i| {
                let mu = means.column(i).clone_owned();
                if attempt == 0 {
                    mu
                } else {
                    let push = 0.5 * attempt as f64;
                    &mu + (&mu - &centroid) * push + gaussian_vector(&mut rng, d, 0.05)
                }
            })
            .collect();
        let psi = Mat::from_columns(&probes.iter().map(|x| predictors::gaussian_likelihood(&model, x)).collect::<Vec<_>>());
        let inv_cond = linalg::inverse_condition(&psi);
        condition = if inv_cond > 0.0 { 1.0 / inv_cond } else { f64::INFINITY };
        if condition > KERNEL_MAX_CONDITION {
            continue;
        }
        let phi = Mat::from_columns(&probes.iter().map(|x| predictors::posterior_gaussian(&model, x)).collect::<Vec<_>>());
        let norm = (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0);
        let grid = Mat::from_fn(k, k, |a, b| norm * oracle.density(&probes[b], &probes[a]));
        let lu_psi_t = psi.transpose().lu();
        let y = lu_psi_t
            .solve(&grid)
            .ok_or_else(|| RecoveryError::Conditioning { attempts: attempt + 1, condition })?;
        let lu_phi_t = phi.transpose().lu();
        let t_raw = lu_phi_t
            .solve(&y.transpose())
            .ok_or_else(|| RecoveryError::Conditioning { attempts: attempt + 1, condition })?
            .transpose();
        let clipped = t_raw.map(|v| if v < 0.0 && v > -1e-10 { 0.0 } else { v });
        if clipped.min() < 0.0 {
            return Err(RecoveryError::Inconsistent(format!("recovered transition has entry {:.3e}", clipped.min())));
        }
        let t = linalg::normalize_column_sums(&clipped);
        let perturbation = linalg::max_abs_diff(&t, &t_raw);
        if perturbation > 1e-8 {
            return Err(RecoveryError::Inconsistent(format!("renormalization moved the transition by {perturbation:.3e}")));
        }
        return Ok(DensityRecovery { transition: t, condition, resamples: attempt, perturbation });
    }
    Err(RecoveryError::Conditioning { attempts: PROBE_RESAMPLES + 1, condition })
}

/// Kruskal check on the factors of a recovery tensor, exposed for diagnostics.
pub fn recovery_tensor_kruskal(p: &HmmParams, task: &MaskedTask) -> Result<tensor_engine::KruskalCheck, RecoveryError> {
    let model = Model::Hmm(p.clone());
    let a = task.anchor();
    let f: Vec<Mat> = task.times().iter().map(|&t| predictors::token_factor(&model, a, t)).collect();
    Ok(tensor_engine::kruskal_condition(&f[0], &f[1], &f[2])?)
}
