//! Parameter records for discrete and conditionally-Gaussian HMMs, validation, stationary
//! analysis, sampling, random instances and the embedded reference fixtures.
//!
//! Conventions: matrices are column-stochastic. `emission[(x, j)] = P(x | h = j)` and
//! `transition[(i, j)] = P(h_{t+1} = i | h_t = j)`. Observations and hidden states are
//! 0-based indices.

use crate::linalg::{self, Mat, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate chain: eigenvalue-1 eigenspace has dimension {0}")]
    DegenerateChain(usize),
    #[error("transition is not column-stochastic (max column-sum deviation {0:.3e})")]
    NotStochastic(f64),
    #[error("instance generation failed after {0} attempts")]
    GenerationFailure(usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unknown fixture '{0}' (expected pairwise_hmm_counterexample, power_counterexample(t), simplex_base)")]
    UnknownFixture(String),
    #[error("model json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmParams {
    /// d x k, column j = P(x | h = j).
    pub emission: Mat,
    /// k x k, column j = P(h' | h = j).
    pub transition: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhmmParams {
    /// d x k, column i = mean of hidden state i.
    pub means: Mat,
    pub transition: Mat,
}

impl HmmParams {
    pub fn new(emission: Mat, transition: Mat) -> Result<Self, ModelError> {
        let p = HmmParams { emission, transition };
        p.check_shapes()?;
        Ok(p)
    }
    pub fn d(&self) -> usize {
        self.emission.nrows()
    }
    pub fn k(&self) -> usize {
        self.emission.ncols()
    }
    fn check_shapes(&self) -> Result<(), ModelError> {
        check_shapes(&self.emission, &self.transition, "emission")
    }
    /// Same model with hidden states relabelled: new state j is old state perm[j].
    pub fn relabel(&self, perm: &[usize]) -> HmmParams {
        HmmParams {
            emission: linalg::permute_columns(&self.emission, perm),
            transition: linalg::permute_square(&self.transition, perm),
        }
    }
}

impl GhmmParams {
    pub fn new(means: Mat, transition: Mat) -> Result<Self, ModelError> {
        let p = GhmmParams { means, transition };
        check_shapes(&p.means, &p.transition, "means")?;
        Ok(p)
    }
    pub fn d(&self) -> usize {
        self.means.nrows()
    }
    pub fn k(&self) -> usize {
        self.means.ncols()
    }
    pub fn relabel(&self, perm: &[usize]) -> GhmmParams {
        GhmmParams {
            means: linalg::permute_columns(&self.means, perm),
            transition: linalg::permute_square(&self.transition, perm),
        }
    }
}

fn check_shapes(obs: &Mat, transition: &Mat, name: &str) -> Result<(), ModelError> {
    let k = obs.ncols();
    if k == 0 || obs.nrows() == 0 {
        return Err(ModelError::Shape(format!("{name} is empty")));
    }
    if transition.shape() != (k, k) {
        return Err(ModelError::Shape(format!(
            "transition is {}x{} but {name} has {k} columns",
            transition.nrows(),
            transition.ncols()
        )));
    }
    Ok(())
}

/// Either model class.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Hmm(HmmParams),
    Ghmm(GhmmParams),
}

impl Model {
    pub fn d(&self) -> usize {
        match self {
            Model::Hmm(p) => p.d(),
            Model::Ghmm(p) => p.d(),
        }
    }
    pub fn k(&self) -> usize {
        match self {
            Model::Hmm(p) => p.k(),
            Model::Ghmm(p) => p.k(),
        }
    }
    pub fn transition(&self) -> &Mat {
        match self {
            Model::Hmm(p) => &p.transition,
            Model::Ghmm(p) => &p.transition,
        }
    }
    /// The emission (discrete) or means (Gaussian) matrix.
    pub fn observation_matrix(&self) -> &Mat {
        match self {
            Model::Hmm(p) => &p.emission,
            Model::Ghmm(p) => &p.means,
        }
    }
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Hmm(_) => "hmm",
            Model::Ghmm(_) => "ghmm",
        }
    }
    pub fn validate(&self, tol: f64) -> Result<ValidationReport, ModelError> {
        match self {
            Model::Hmm(p) => validate_hmm(p, tol),
            Model::Ghmm(p) => validate_ghmm(p, tol),
        }
    }
    pub fn relabel(&self, perm: &[usize]) -> Model {
        match self {
            Model::Hmm(p) => Model::Hmm(p.relabel(perm)),
            Model::Ghmm(p) => Model::Ghmm(p.relabel(perm)),
        }
    }
    pub fn to_json(&self) -> ModelJson {
        let (emission, means) = match self {
            Model::Hmm(p) => (Some(linalg::to_rows(&p.emission)), None),
            Model::Ghmm(p) => (None, Some(linalg::to_rows(&p.means))),
        };
        ModelJson {
            kind: self.kind().to_string(),
            d: self.d(),
            k: self.k(),
            emission,
            means,
            transition: linalg::to_rows(self.transition()),
        }
    }
    pub fn from_json(j: &ModelJson) -> Result<Model, ModelError> {
        let transition = linalg::from_rows(&j.transition)
            .ok_or_else(|| ModelError::Json("transition rows are ragged".into()))?;
        let (name, rows) = match (j.kind.as_str(), &j.emission, &j.means) {
            ("hmm", Some(e), None) => ("emission", e),
            ("ghmm", None, Some(m)) => ("means", m),
            ("hmm", _, _) => return Err(ModelError::Json("kind 'hmm' needs 'emission' and no 'means'".into())),
            ("ghmm", _, _) => return Err(ModelError::Json("kind 'ghmm' needs 'means' and no 'emission'".into())),
            (other, _, _) => return Err(ModelError::Json(format!("unknown kind '{other}' (expected hmm or ghmm)"))),
        };
        let obs = linalg::from_rows(rows).ok_or_else(|| ModelError::Json(format!("{name} rows are ragged")))?;
        if obs.shape() != (j.d, j.k) {
            return Err(ModelError::Shape(format!(
                "{name} is {}x{} but d={}, k={}",
                obs.nrows(),
                obs.ncols(),
                j.d,
                j.k
            )));
        }
        Ok(match j.kind.as_str() {
            "hmm" => Model::Hmm(HmmParams::new(obs, transition)?),
            _ => Model::Ghmm(GhmmParams::new(obs, transition)?),
        })
    }
}

/// Serialized model: `{"kind","d","k","emission"|"means","transition"}` with row-major rows.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelJson {
    pub kind: String,
    pub d: usize,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emission: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    pub transition: Vec<Vec<f64>>,
}

impl Serialize for Model {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Model {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let j = ModelJson::deserialize(d)?;
        Model::from_json(&j).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    EmissionColumnSums,
    EmissionEntryRange,
    EmissionZeroRow,
    EmissionRank,
    TransitionColumnSums,
    TransitionRowSums,
    TransitionEntryRange,
    TransitionRank,
    HiddenExceedsObserved,
    MeansUnitNorm,
    MeansRank,
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: Invariant,
    pub residual: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
    pub fn find(&self, inv: Invariant) -> Option<&Violation> {
        self.violations.iter().find(|v| v.invariant == inv)
    }
    fn push(&mut self, invariant: Invariant, residual: f64, detail: String) {
        self.violations.push(Violation { invariant, residual, detail });
    }
}

fn max_dev_from_one(sums: &[f64]) -> f64 {
    sums.iter().fold(0.0, |m, s| m.max((s - 1.0).abs()))
}

fn range_excess(a: &Mat) -> f64 {
    a.iter().fold(0.0f64, |m, &v| m.max(-v).max(v - 1.0))
}

fn check_rank(a: &Mat, inv: Invariant, name: &str, report: &mut ValidationReport) {
    let k = a.ncols();
    let r = linalg::numerical_rank(a, linalg::RANK_RTOL);
    if r < k {
        report.push(inv, linalg::inverse_condition(a), format!("{name} has numerical rank {r} < {k}"));
    }
}

fn check_transition(t: &Mat, tol: f64, report: &mut ValidationReport) {
    let cs = max_dev_from_one(&linalg::column_sums(t));
    if cs > tol {
        report.push(Invariant::TransitionColumnSums, cs, "transition column sums differ from 1".into());
    }
    let rs = max_dev_from_one(&linalg::row_sums(t));
    if rs > tol {
        report.push(Invariant::TransitionRowSums, rs, "transition row sums differ from 1 (not doubly stochastic)".into());
    }
    let ex = range_excess(t);
    if ex > tol {
        report.push(Invariant::TransitionEntryRange, ex, "transition entries outside [0,1]".into());
    }
    check_rank(t, Invariant::TransitionRank, "transition", report);
}

fn check_hidden_count(d: usize, k: usize, report: &mut ValidationReport) {
    if k > d {
        report.push(Invariant::HiddenExceedsObserved, (k - d) as f64, format!("k={k} exceeds d={d}"));
    }
}

/// Checks every discrete-HMM invariant at `tol`. Shape problems are an `Err`, invariant
/// failures are report entries with measured residuals.
pub fn validate_hmm(p: &HmmParams, tol: f64) -> Result<ValidationReport, ModelError> {
    p.check_shapes()?;
    let mut report = ValidationReport::default();
    let o = &p.emission;
    let cs = max_dev_from_one(&linalg::column_sums(o));
    if cs > tol {
        report.push(Invariant::EmissionColumnSums, cs, "emission column sums differ from 1".into());
    }
    let ex = range_excess(o);
    if ex > tol {
        report.push(Invariant::EmissionEntryRange, ex, "emission entries outside [0,1]".into());
    }
    for (x, row) in o.row_iter().enumerate() {
        let m = row.iter().fold(0.0f64, |m, v| m.max(*v));
        if m <= 0.0 {
            report.push(Invariant::EmissionZeroRow, m, format!("emission row {x} has no positive entry"));
        }
    }
    check_hidden_count(p.d(), p.k(), &mut report);
    check_rank(o, Invariant::EmissionRank, "emission", &mut report);
    check_transition(&p.transition, tol, &mut report);
    Ok(report)
}

/// Gaussian analogue of [`validate_hmm`], with the unit-norm check on the means.
pub fn validate_ghmm(p: &GhmmParams, tol: f64) -> Result<ValidationReport, ModelError> {
    check_shapes(&p.means, &p.transition, "means")?;
    let mut report = ValidationReport::default();
    let dev = p.means.column_iter().fold(0.0f64, |m, c| m.max((c.norm() - 1.0).abs()));
    if dev > tol {
        report.push(Invariant::MeansUnitNorm, dev, "mean columns are not unit norm".into());
    }
    check_hidden_count(p.d(), p.k(), &mut report);
    check_rank(&p.means, Invariant::MeansRank, "means", &mut report);
    check_transition(&p.transition, tol, &mut report);
    Ok(report)
}

fn ensure_valid(model: &Model) -> Result<(), ModelError> {
    let report = model.validate(1e-9)?;
    if let Some(v) = report.violations.first() {
        return Err(ModelError::InvalidParams(format!("{}: residual {:.3e}", v.invariant, v.residual)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// stationary analysis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryInfo {
    pub distribution: Vec<f64>,
    pub is_uniform: bool,
}

/// Stationary distribution of a column-stochastic matrix.
pub fn stationary(t: &Mat) -> Result<StationaryInfo, ModelError> {
    let k = t.nrows();
    if t.ncols() != k || k == 0 {
        return Err(ModelError::Shape(format!("transition is {}x{}", t.nrows(), t.ncols())));
    }
    let dev = max_dev_from_one(&linalg::column_sums(t));
    if dev > 1e-9 {
        return Err(ModelError::NotStochastic(dev));
    }
    let shifted = t - Mat::identity(k, k);
    let s = linalg::singular_values(&shifted);
    let nullity = s.iter().filter(|&&v| v <= 1e-9).count();
    if nullity > 1 {
        return Err(ModelError::DegenerateChain(nullity));
    }
    let v = linalg::null_vector(&shifted);
    let total = v.sum();
    let pi: Vec<f64> = v.iter().map(|x| x / total).collect();
    let u = 1.0 / k as f64;
    let is_uniform = pi.iter().all(|p| (p - u).abs() <= 1e-10);
    Ok(StationaryInfo { distribution: pi, is_uniform })
}

// ---------------------------------------------------------------------------
// sampling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observation {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Observation {
    pub fn as_index(&self) -> Option<usize> {
        match self {
            Observation::Discrete(i) => Some(*i),
            Observation::Continuous(_) => None,
        }
    }
    pub fn as_vector(&self) -> Option<Vector> {
        match self {
            Observation::Continuous(v) => Some(Vector::from_column_slice(v)),
            Observation::Discrete(_) => None,
        }
    }
}

impl From<usize> for Observation {
    fn from(i: usize) -> Self {
        Observation::Discrete(i)
    }
}

impl From<&Vector> for Observation {
    fn from(v: &Vector) -> Self {
        Observation::Continuous(v.iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub hidden: usize,
    pub obs: Observation,
}

fn categorical(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

fn column_cdfs(a: &Mat) -> Vec<Vec<f64>> {
    a.column_iter()
        .map(|c| {
            let mut acc = 0.0;
            c.iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect()
}

/// Forward simulation. The initial state is drawn from the stationary distribution, which is
/// uniform for the doubly stochastic chains accepted here.
pub fn sample_sequence(model: &Model, length: usize, seed: u64) -> Result<Vec<Step>, ModelError> {
    if length == 0 {
        return Err(ModelError::InvalidParams("sequence length must be at least 1".into()));
    }
    ensure_valid(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = model.k();
    let tcdf = column_cdfs(model.transition());
    let ecdf = match model {
        Model::Hmm(p) => column_cdfs(&p.emission),
        Model::Ghmm(_) => Vec::new(),
    };
    let mut h = rng.random_range(0..k);
    let mut out = Vec::with_capacity(length);
    for t in 0..length {
        if t > 0 {
            h = categorical(&tcdf[h], rng.random::<f64>());
        }
        let obs = match model {
            Model::Hmm(_) => Observation::Discrete(categorical(&ecdf[h], rng.random::<f64>())),
            Model::Ghmm(p) => Observation::Continuous(
                p.means.column(h).iter().map(|m| { let z: f64 = StandardNormal.sample(&mut rng); m + z }).collect(),
            ),
        };
        out.push(Step { hidden: h, obs });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// random instances

const SINKHORN_SWEEPS: usize = 50;
const MAX_GENERATION_ATTEMPTS: usize = 200;
pub const DEFAULT_CONDITION_FLOOR: f64 = 0.05;

fn lognormal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z.exp()
    })
}

fn stochastic_residual(a: &Mat, row_target: f64) -> f64 {
    let rs = linalg::row_sums(a).iter().fold(0.0f64, |m, s| m.max((s - row_target).abs()));
    rs.max(max_dev_from_one(&linalg::column_sums(a)))
}

/// Alternating row/column scaling to row sums `row_target` and column sums 1.
fn sinkhorn(mut a: Mat, row_target: f64) -> Mat {
    let mut sweep = 0;
    loop {
        for mut r in a.row_iter_mut() {
            let s = r.sum();
            r *= row_target / s;
        }
        for mut c in a.column_iter_mut() {
            let s = c.sum();
            c /= s;
        }
        sweep += 1;
        if sweep >= SINKHORN_SWEEPS && (stochastic_residual(&a, row_target) <= 1e-14 || sweep >= 20 * SINKHORN_SWEEPS) {
            return a;
        }
    }
}

/// Random doubly stochastic k x k matrix (Sinkhorn on a log-normal positive matrix). Any
/// residual left above 1e-12 after the sweeps is removed by mixing with the uniform matrix.
pub fn random_doubly_stochastic(rng: &mut ChaCha8Rng, k: usize, symmetric: bool) -> Mat {
    let mut a = lognormal_matrix(rng, k, k);
    if symmetric {
        a = (&a + a.transpose()) * 0.5;
    }
    let mut t = sinkhorn(a, 1.0);
    if symmetric {
        t = (&t + t.transpose()) * 0.5;
    }
    let res = stochastic_residual(&t, 1.0);
    if res > 1e-12 {
        let alpha = 1.0 - 1e-13 / res;
        t = t * (1.0 - alpha) + Mat::from_element(k, k, alpha / k as f64);
    }
    t
}

fn sigma_min(a: &Mat) -> f64 {
    linalg::singular_values(a).last().copied().unwrap_or(0.0)
}

/// Random valid discrete HMM, resampled until both matrices have smallest singular value at
/// least `condition_floor`.
pub fn random_hmm(d: usize, k: usize, seed: u64, symmetric_t: bool, condition_floor: f64) -> Result<HmmParams, ModelError> {
    if k < 1 || k > d {
        return Err(ModelError::InvalidParams(format!("need 1 <= k <= d, got d={d}, k={k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let t = random_doubly_stochastic(&mut rng, k, symmetric_t);
        let o = linalg::normalize_column_sums(&lognormal_matrix(&mut rng, d, k));
        if sigma_min(&t) >= condition_floor && sigma_min(&o) >= condition_floor {
            return Ok(HmmParams { emission: o, transition: t });
        }
    }
    Err(ModelError::GenerationFailure(MAX_GENERATION_ATTEMPTS))
}

/// Random valid G-HMM with Gaussian-direction unit-norm means.
pub fn random_ghmm(d: usize, k: usize, seed: u64, symmetric_t: bool, condition_floor: f64) -> Result<GhmmParams, ModelError> {
    if k < 1 || k > d {
        return Err(ModelError::InvalidParams(format!("need 1 <= k <= d, got d={d}, k={k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let t = random_doubly_stochastic(&mut rng, k, symmetric_t);
        let g = Mat::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
        let m = linalg::normalize_column_norms(&g);
        if sigma_min(&t) >= condition_floor && sigma_min(&m) >= condition_floor {
            return Ok(GhmmParams { means: m, transition: t });
        }
    }
    Err(ModelError::GenerationFailure(MAX_GENERATION_ATTEMPTS))
}

/// Random k = 3 base for the simplex rotation: symmetric doubly stochastic transition and an
/// emission whose rows all sum to 3/d. Entries are kept away from 0 so that small rotations
/// stay feasible.
pub fn random_simplex_base(d: usize, seed: u64) -> Result<HmmParams, ModelError> {
    if d < 3 {
        return Err(ModelError::InvalidParams(format!("simplex base needs d >= 3, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let raw = Mat::from_fn(d, 3, |_, _| rng.random_range(0.5..1.5));
        let o = sinkhorn(raw, 3.0 / d as f64);
        let traw = Mat::from_fn(3, 3, |_, _| rng.random_range(0.2..1.8));
        let t = random_from_symmetric(traw);
        let p = HmmParams { emission: o, transition: t };
        if validate_hmm(&p, 1e-12)?.is_empty() && sigma_min(&p.transition) >= 0.05 {
            return Ok(p);
        }
    }
    Err(ModelError::GenerationFailure(MAX_GENERATION_ATTEMPTS))
}

fn random_from_symmetric(a: Mat) -> Mat {
    let s = (&a + a.transpose()) * 0.5;
    let t = sinkhorn(s, 1.0);
    (&t + t.transpose()) * 0.5
}

// ---------------------------------------------------------------------------
// fixtures

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureName {
    PairwiseHmmCounterexample,
    PowerCounterexample(u32),
    SimplexBase,
}

impl FixtureName {
    /// Parses `pairwise_hmm_counterexample`, `simplex_base` or `power_counterexample(t)`.
    pub fn parse(s: &str) -> Result<FixtureName, ModelError> {
        let s = s.trim();
        match s {
            "pairwise_hmm_counterexample" => return Ok(FixtureName::PairwiseHmmCounterexample),
            "simplex_base" => return Ok(FixtureName::SimplexBase),
            _ => {}
        }
        s.strip_prefix("power_counterexample(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|t| t.trim().parse::<u32>().ok())
            .filter(|&t| t >= 1)
            .map(FixtureName::PowerCounterexample)
            .ok_or_else(|| ModelError::UnknownFixture(s.to_string()))
    }
}

/// Matrices of the power-rotation construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFixture {
    pub t: u32,
    pub a: f64,
    pub transition: Mat,
    /// Change of basis M in which the circulant transition acts as a planar rotation.
    pub basis: Mat,
    pub theta: f64,
}

impl PowerFixture {
    /// Planar rotation R(theta) about the third axis.
    pub fn rotation(&self) -> Mat {
        planar_rotation(self.theta)
    }
}

pub fn planar_rotation(theta: f64) -> Mat {
    let (s, c) = theta.sin_cos();
    Mat::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
}

/// Circulant transition `[[a,0,1-a],[1-a,a,0],[0,1-a,a]]`.
pub fn circulant_transition(a: f64) -> Mat {
    Mat::from_row_slice(3, 3, &[a, 0.0, 1.0 - a, 1.0 - a, a, 0.0, 0.0, 1.0 - a, a])
}

pub fn power_basis() -> Mat {
    let h = 3f64.sqrt() / 2.0;
    let r = std::f64::consts::FRAC_1_SQRT_2;
    Mat::from_row_slice(3, 3, &[1.0, -0.5, -0.5, 0.0, -h, h, r, r, r])
}

#[derive(Debug, Clone, PartialEq)]
pub enum FixtureBundle {
    PairwiseHmmCounterexample { original: HmmParams, alternative: HmmParams },
    PowerCounterexample(PowerFixture),
    SimplexBase(HmmParams),
}

const FIX_A_O: [f64; 12] = [
    0.23016003, 0.3549092, 0.16493077, //
    0.30716059, 0.06962305, 0.37321636, //
    0.2580854, 0.26965425, 0.22226035, //
    0.20459398, 0.3058135, 0.23959252,
];
const FIX_A_O_ALT: [f64; 12] = [
    0.24120928, 0.35062535, 0.15816537, //
    0.28937626, 0.07433156, 0.38629218, //
    0.26077674, 0.26749114, 0.22173212, //
    0.20863772, 0.30755194, 0.23381033,
];
const FIX_A_T: [f64; 9] = [
    0.56893146, 0.35811118, 0.07295736, //
    0.35811118, 0.10805638, 0.53383243, //
    0.07295736, 0.53383243, 0.39321021,
];
const FIX_A_T_ALT: [f64; 9] = [
    0.59740926, 0.30452087, 0.09806987, //
    0.30452087, 0.1331689, 0.56231024, //
    0.09806987, 0.56231024, 0.33961989,
];

fn fixture_a() -> (HmmParams, HmmParams) {
    (
        HmmParams { emission: Mat::from_row_slice(4, 3, &FIX_A_O), transition: Mat::from_row_slice(3, 3, &FIX_A_T) },
        HmmParams {
            emission: Mat::from_row_slice(4, 3, &FIX_A_O_ALT),
            transition: Mat::from_row_slice(3, 3, &FIX_A_T_ALT),
        },
    )
}

/// The embedded reference matrices, stored at their printed 8-digit precision.
pub fn fixture(name: FixtureName) -> FixtureBundle {
    match name {
        FixtureName::PairwiseHmmCounterexample => {
            let (original, alternative) = fixture_a();
            FixtureBundle::PairwiseHmmCounterexample { original, alternative }
        }
        FixtureName::SimplexBase => FixtureBundle::SimplexBase(fixture_a().0),
        FixtureName::PowerCounterexample(t) => FixtureBundle::PowerCounterexample(PowerFixture {
            t,
            a: 0.5,
            transition: circulant_transition(0.5),
            basis: power_basis(),
            theta: 2.0 * std::f64::consts::PI / t as f64,
        }),
    }
}

/// Looks up a fixture by its string name.
pub fn fixture_by_name(name: &str) -> Result<FixtureBundle, ModelError> {
    FixtureName::parse(name).map(fixture)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_model_is_valid() {
        let p = HmmParams::new(Mat::identity(3, 3), Mat::identity(3, 3)).unwrap();
        assert!(validate_hmm(&p, 1e-9).unwrap().is_empty());
    }

    #[test]
    fn row_sum_violation_residual() {
        let t = Mat::from_row_slice(2, 2, &[0.9, 0.2, 0.1, 0.8]);
        let p = HmmParams::new(Mat::identity(2, 2), t).unwrap();
        let r = validate_hmm(&p, 1e-9).unwrap();
        let v = r.find(Invariant::TransitionRowSums).unwrap();
        assert!((v.residual - 0.1).abs() < 1e-12);
        assert!(r.find(Invariant::TransitionColumnSums).is_none());
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let p = HmmParams { emission: Mat::identity(3, 2), transition: Mat::identity(3, 3) };
        assert!(matches!(validate_hmm(&p, 1e-9), Err(ModelError::Shape(_))));
        assert!(HmmParams::new(Mat::identity(3, 2), Mat::identity(3, 3)).is_err());
    }

    #[test]
    fn ghmm_checks() {
        let mut m = Mat::zeros(3, 2);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = 1.0;
        let t = Mat::from_row_slice(2, 2, &[0.7, 0.3, 0.3, 0.7]);
        let p = GhmmParams::new(m.clone(), t.clone()).unwrap();
        assert!(validate_ghmm(&p, 1e-12).unwrap().is_empty());

        let mut scaled = m.clone();
        scaled[(0, 0)] = 2.0;
        let r = validate_ghmm(&GhmmParams::new(scaled, t.clone()).unwrap(), 1e-12).unwrap();
        assert!((r.find(Invariant::MeansUnitNorm).unwrap().residual - 1.0).abs() < 1e-12);

        let mut dup = Mat::zeros(3, 2);
        dup[(0, 0)] = 1.0;
        dup[(0, 1)] = 1.0;
        let r = validate_ghmm(&GhmmParams::new(dup, t).unwrap(), 1e-12).unwrap();
        assert!(r.find(Invariant::MeansRank).is_some());
    }

    #[test]
    fn stationary_cases() {
        let t = Mat::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8]);
        let s = stationary(&t).unwrap();
        assert!(s.is_uniform);
        assert!((s.distribution[0] - 0.5).abs() < 1e-12);
        assert_eq!(stationary(&Mat::identity(3, 3)), Err(ModelError::DegenerateChain(3)));
    }

    #[test]
    fn stationary_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_doubly_stochastic(&mut rng, 4, false);
        let s = stationary(&t).unwrap();
        let mut v = Vector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        for _ in 0..2000 {
            v = &t * v;
        }
        assert!(s.is_uniform);
        for i in 0..4 {
            assert!((s.distribution[i] - v[i]).abs() < 1e-10);
            assert!((s.distribution[i] - 0.25).abs() < 1e-10);
        }
    }

    #[test]
    fn non_uniform_stationary_for_non_doubly_stochastic() {
        let t = Mat::from_row_slice(2, 2, &[0.9, 0.2, 0.1, 0.8]);
        let s = stationary(&t).unwrap();
        assert!(!s.is_uniform);
        assert!((s.distribution[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identity_dynamics_sample() {
        let p = Model::Hmm(HmmParams::new(Mat::identity(2, 2), Mat::identity(2, 2)).unwrap());
        let seq = sample_sequence(&p, 50, 1).unwrap();
        let h0 = seq[0].hidden;
        assert!(seq.iter().all(|s| s.hidden == h0 && s.obs == Observation::Discrete(h0)));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = Model::Hmm(random_hmm(4, 3, 3, false, DEFAULT_CONDITION_FLOOR).unwrap());
        assert_eq!(sample_sequence(&p, 100, 9).unwrap(), sample_sequence(&p, 100, 9).unwrap());
        assert_ne!(sample_sequence(&p, 100, 9).unwrap(), sample_sequence(&p, 100, 10).unwrap());
    }

    #[test]
    fn empirical_transitions_match() {
        let p = random_hmm(4, 3, 5, false, DEFAULT_CONDITION_FLOOR).unwrap();
        let seq = sample_sequence(&Model::Hmm(p.clone()), 1_000_000, 2).unwrap();
        let mut counts = Mat::zeros(3, 3);
        let mut from = [0.0; 3];
        for w in seq.windows(2) {
            counts[(w[1].hidden, w[0].hidden)] += 1.0;
            from[w[0].hidden] += 1.0;
        }
        for j in 0..3 {
            for i in 0..3 {
                assert!((counts[(i, j)] / from[j] - p.transition[(i, j)]).abs() < 0.01);
            }
        }
    }

    #[test]
    fn reversed_chain_is_transpose() {
        let p = random_hmm(4, 3, 21, false, DEFAULT_CONDITION_FLOOR).unwrap();
        let seq = sample_sequence(&Model::Hmm(p.clone()), 1_000_000, 4).unwrap();
        let mut counts = Mat::zeros(3, 3);
        let mut to = [0.0; 3];
        for w in seq.windows(2) {
            // P(h_t = i | h_{t+1} = j)
            counts[(w[0].hidden, w[1].hidden)] += 1.0;
            to[w[1].hidden] += 1.0;
        }
        let tt = p.transition.transpose();
        for j in 0..3 {
            for i in 0..3 {
                assert!((counts[(i, j)] / to[j] - tt[(i, j)]).abs() < 0.01);
            }
        }
    }

    #[test]
    fn single_state_gaussian_sample_mean() {
        let mut m = Mat::zeros(3, 1);
        m[(0, 0)] = 1.0;
        let p = Model::Ghmm(GhmmParams::new(m, Mat::identity(1, 1)).unwrap());
        let seq = sample_sequence(&p, 100_000, 3).unwrap();
        let mut mean = Vector::zeros(3);
        for s in &seq {
            mean += s.obs.as_vector().unwrap();
        }
        mean /= seq.len() as f64;
        assert!((mean[0] - 1.0).abs() < 0.02 && mean[1].abs() < 0.02 && mean[2].abs() < 0.02);
    }

    #[test]
    fn random_hmm_valid_and_reproducible() {
        let p = random_hmm(5, 3, 7, false, DEFAULT_CONDITION_FLOOR).unwrap();
        assert!(validate_hmm(&p, 1e-12).unwrap().is_empty());
        assert_eq!(p, random_hmm(5, 3, 7, false, DEFAULT_CONDITION_FLOOR).unwrap());
        let s = random_hmm(5, 3, 8, true, DEFAULT_CONDITION_FLOOR).unwrap();
        assert!(linalg::max_abs_diff(&s.transition, &s.transition.transpose()) <= 1e-12);
        assert!(validate_hmm(&s, 1e-12).unwrap().is_empty());
    }

    #[test]
    fn random_hmm_high_floor_fails() {
        assert_eq!(random_hmm(5, 3, 1, false, 0.9), Err(ModelError::GenerationFailure(200)));
    }

    #[test]
    fn random_simplex_base_structure() {
        let p = random_simplex_base(4, 3).unwrap();
        assert!(linalg::max_abs_diff(&p.transition, &p.transition.transpose()) <= 1e-12);
        for s in linalg::row_sums(&p.emission) {
            assert!((s - 0.75).abs() <= 1e-12);
        }
    }

    #[test]
    fn fixture_lookup() {
        match fixture_by_name("pairwise_hmm_counterexample").unwrap() {
            FixtureBundle::PairwiseHmmCounterexample { original, alternative } => {
                assert_eq!(original.emission[(0, 0)], 0.23016003);
                assert!(validate_hmm(&original, 1e-6).unwrap().is_empty());
                assert!(validate_hmm(&alternative, 1e-6).unwrap().is_empty());
                assert!((original.transition.determinant() + 0.1611).abs() < 5e-4);
            }
            _ => panic!("wrong bundle"),
        }
        assert!(matches!(fixture_by_name("nope"), Err(ModelError::UnknownFixture(_))));
        match fixture_by_name("power_counterexample(1)").unwrap() {
            FixtureBundle::PowerCounterexample(f) => {
                assert!(linalg::max_abs_diff(&f.rotation(), &Mat::identity(3, 3)) < 1e-12)
            }
            _ => panic!("wrong bundle"),
        }
    }

    #[test]
    fn json_round_trip() {
        let p = Model::Hmm(random_hmm(4, 2, 1, false, DEFAULT_CONDITION_FLOOR).unwrap());
        let s = serde_json::to_string(&p).unwrap();
        let back: Model = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
        let bad = r#"{"kind":"hmm","d":2,"k":2,"emission":[[1,0],[0,1]],"transition":[[1,0],[0,1]],"extra":1}"#;
        assert!(serde_json::from_str::<Model>(bad).is_err());
    }
}
