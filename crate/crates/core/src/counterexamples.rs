//! Non-identifiability constructions and their validator.

use crate::linalg::{self, Mat, Vector};
use crate::models::{self, GhmmParams, HmmParams, Model, ModelError, Observation};
use crate::predictors::{self, MaskedTask, PredictError};
use crate::seeding;
use itertools::Itertools;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use std::f64::consts::FRAC_PI_3;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CounterexampleError {
    #[error("base parameters do not have the required structure: {0}")]
    Structure(String),
    #[error("rotation angle {theta} leaves [0,1]; largest feasible angle is {max_feasible:.12}")]
    AngleTooLarge { theta: f64, max_feasible: f64 },
    #[error("power construction infeasible for t={t}, a={a}: smallest entry {min_entry:.3e}")]
    Infeasible { t: u32, a: f64, min_entry: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

/// Two parameter sets that share the optimal predictors of every listed task.
#[derive(Debug, Clone, Serialize)]
pub struct CounterexamplePair {
    pub original: Model,
    pub alternative: Model,
    pub tasks: Vec<MaskedTask>,
    pub construction: String,
    pub theta: Option<f64>,
}

/// Rotation by `theta` about the axis (1,1,1)/sqrt(3). Rows and columns sum to 1.
pub fn simplex_rotation(theta: f64) -> Mat {
    let u = Vector::from_element(3, 1.0 / 3f64.sqrt());
    let cross = Mat::from_row_slice(3, 3, &[0.0, -u[2], u[1], u[2], 0.0, -u[0], -u[1], u[0], 0.0]);
    let (s, c) = theta.sin_cos();
    Mat::identity(3, 3) * c + cross * s + &u * u.transpose() * (1.0 - c)
}

fn rotated(base: &HmmParams, theta: f64) -> HmmParams {
    let r = simplex_rotation(theta);
    HmmParams { emission: &base.emission * &r, transition: r.transpose() * &base.transition * &r }
}

fn in_unit_interval(p: &HmmParams) -> bool {
    let ok = |m: &Mat| m.iter().all(|&v| (0.0..=1.0).contains(&v));
    ok(&p.emission) && ok(&p.transition)
}

/// Checks the simplex-rotation preconditions: k = 3, symmetric T, emission rows summing to k/d.
pub fn check_simplex_base(base: &HmmParams, tol: f64) -> Result<(), CounterexampleError> {
    if base.k() != 3 {
        return Err(CounterexampleError::Structure(format!("k must be 3, got {}", base.k())));
    }
    let asym = linalg::max_abs_diff(&base.transition, &base.transition.transpose());
    if asym > tol {
        return Err(CounterexampleError::Structure(format!("transition asymmetry {asym:.3e}")));
    }
    let target = 3.0 / base.d() as f64;
    let dev = linalg::row_sums(&base.emission).iter().fold(0.0f64, |m, s| m.max((s - target).abs()));
    if dev > tol {
        return Err(CounterexampleError::Structure(format!("emission row sums deviate from k/d by {dev:.3e}")));
    }
    Ok(())
}

/// Largest angle in (0, pi/3] with the sign of `direction` keeping all entries in [0,1].
pub fn max_feasible_angle(base: &HmmParams, direction: f64) -> f64 {
    let sign = if direction < 0.0 { -1.0 } else { 1.0 };
    if in_unit_interval(&rotated(base, sign * FRAC_PI_3)) {
        return sign * FRAC_PI_3;
    }
    let (mut lo, mut hi) = (0.0, FRAC_PI_3);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if in_unit_interval(&rotated(base, sign * mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    sign * lo
}

pub fn pairwise_tasks() -> Vec<MaskedTask> {
    ["x2|x1", "x1|x2", "x3|x1", "x1|x3"].iter().map(|s| s.parse().expect("static task")).collect()
}

/// `(O R, R^T T R)` for the simplex rotation R(theta); structure is checked at 1e-12.
pub fn simplex_rotation_pair(base: &HmmParams, theta: f64) -> Result<CounterexamplePair, CounterexampleError> {
    check_simplex_base(base, 1e-12)?;
    let alt = rotated(base, theta);
    if !in_unit_interval(&alt) {
        return Err(CounterexampleError::AngleTooLarge { theta, max_feasible: max_feasible_angle(base, theta) });
    }
    Ok(CounterexamplePair {
        original: Model::Hmm(base.clone()),
        alternative: Model::Hmm(alt),
        tasks: pairwise_tasks(),
        construction: "simplex_rotation".into(),
        theta: Some(theta),
    })
}

/// Result of matching a rotation of `base` to a target pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AngleFit {
    pub theta: f64,
    pub emission_error: f64,
    pub transition_error: f64,
}

/// Finds the rotation angle in [-pi/3, pi/3] mapping `base` closest to `target`
/// (grid scan, then golden-section refinement). Errors are max-abs entry differences.
pub fn fit_simplex_angle(base: &HmmParams, target: &HmmParams) -> AngleFit {
    let cost = |th: f64| {
        let r = rotated(base, th);
        linalg::frob_diff(&r.emission, &target.emission).powi(2) + linalg::frob_diff(&r.transition, &target.transition).powi(2)
    };
    let n = 2000;
    let step = 2.0 * FRAC_PI_3 / n as f64;
    let best = (0..=n)
        .map(|i| -FRAC_PI_3 + i as f64 * step)
        .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
        .unwrap();
    let (mut a, mut b) = (best - step, best + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if cost(c) < cost(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let theta = 0.5 * (a + b);
    let r = rotated(base, theta);
    AngleFit {
        theta,
        emission_error: linalg::max_abs_diff(&r.emission, &target.emission),
        transition_error: linalg::max_abs_diff(&r.transition, &target.transition),
    }
}

/// Tasks whose tokens are all spaced by multiples of `t`.
pub fn power_tasks(t: u32) -> Vec<MaskedTask> {
    let (a, b, c) = (1, 1 + t, 1 + 2 * t);
    vec![
        MaskedTask { predicted: vec![b], conditioned: vec![a] },
        MaskedTask { predicted: vec![a], conditioned: vec![b] },
        MaskedTask { predicted: vec![b, c], conditioned: vec![a] },
        MaskedTask { predicted: vec![a, c], conditioned: vec![b] },
        MaskedTask { predicted: vec![c], conditioned: vec![a, b] },
    ]
}

/// Diagnostics of the power construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerDiagnostics {
    pub commutation_residual: f64,
    pub power_residual: f64,
    pub stochastic_residual: f64,
    pub min_entry: f64,
    pub transition_distance: f64,
}

/// `T~ = M^-1 R(2 pi / t)^-1 M T` with the circulant T(a) and emission I_3.
pub fn power_rotation_pair(t: u32, a: f64) -> Result<(CounterexamplePair, PowerDiagnostics), CounterexampleError> {
    power_rotation_pair_with_emission(t, a, &Mat::identity(3, 3))
}

pub fn power_rotation_pair_with_emission(t: u32, a: f64, emission: &Mat) -> Result<(CounterexamplePair, PowerDiagnostics), CounterexampleError> {
    if t == 0 || !(0.0..=1.0).contains(&a) {
        return Err(CounterexampleError::Structure(format!("need t >= 1 and a in [0,1], got t={t}, a={a}")));
    }
    if emission.ncols() != 3 {
        return Err(CounterexampleError::Structure("emission must have 3 columns".into()));
    }
    let tr = models::circulant_transition(a);
    let m = models::power_basis();
    let m_inv = m.clone().try_inverse().expect("basis is invertible");
    let theta = 2.0 * std::f64::consts::PI / t as f64;
    let q = &m_inv * models::planar_rotation(-theta) * &m;
    let alt = &q * &tr;
    let min_entry = alt.min();
    if min_entry < -1e-12 {
        return Err(CounterexampleError::Infeasible { t, a, min_entry });
    }
    let diag = PowerDiagnostics {
        commutation_residual: linalg::max_abs_diff(&(&q * &tr), &(&tr * &q)),
        power_residual: linalg::max_abs_diff(&linalg::mat_pow(&tr, t as usize), &linalg::mat_pow(&alt, t as usize)),
        stochastic_residual: linalg::column_sums(&alt)
            .into_iter()
            .chain(linalg::row_sums(&alt))
            .fold(0.0f64, |mx, s| mx.max((s - 1.0).abs())),
        min_entry,
        transition_distance: linalg::max_abs_diff(&tr, &alt),
    };
    let pair = CounterexamplePair {
        original: Model::Hmm(HmmParams::new(emission.clone(), tr)?),
        alternative: Model::Hmm(HmmParams::new(emission.clone(), alt)?),
        tasks: power_tasks(t),
        construction: "power_rotation".into(),
        theta: Some(theta),
    };
    Ok((pair, diag))
}

/// Reflection mapping the means to the only other posterior-preserving configuration.
#[derive(Debug, Clone, Serialize)]
pub struct HouseholderCertificate {
    pub v_hat: Vector,
    pub h: Mat,
    pub reflected_means: Mat,
    /// Column sums of `pinv(H M) (M T)`.
    pub column_sums: Vec<f64>,
    pub involution_residual: f64,
    pub unit_norm_residual: f64,
    pub translation_residual: f64,
    pub column_sum_residual: f64,
    pub passes: bool,
}

pub fn householder_certificate(params: &GhmmParams) -> Result<HouseholderCertificate, CounterexampleError> {
    let report = models::validate_ghmm(params, 1e-9)?;
    if !report.is_empty() {
        return Err(CounterexampleError::Structure(format!("invalid parameters: {:?}", report.violations)));
    }
    let m = &params.means;
    let (d, k) = m.shape();
    let w = linalg::pinv(m).transpose() * Vector::from_element(k, 1.0);
    let v_hat = &w / w.norm();
    let h = Mat::identity(d, d) - &v_hat * v_hat.transpose() * 2.0;
    let hm = &h * m;
    let involution_residual = linalg::max_abs_diff(&(&h * &h), &Mat::identity(d, d));
    let unit_norm_residual = hm.column_iter().map(|c| (c.norm() - 1.0).abs()).fold(0.0, f64::max);
    let shift = &hm - m;
    let translation_residual = (1..k).map(|j| (shift.column(j) - shift.column(0)).amax()).fold(0.0, f64::max);
    let column_sums = linalg::column_sums(&(linalg::pinv(&hm) * m * &params.transition));
    let column_sum_residual = column_sums.iter().map(|s| (s + 1.0).abs()).fold(0.0, f64::max);
    let passes = involution_residual <= 1e-12 && unit_norm_residual <= 1e-10 && translation_residual <= 1e-10 && column_sum_residual <= 1e-8;
    Ok(HouseholderCertificate {
        v_hat,
        h,
        reflected_means: hm,
        column_sums,
        involution_residual,
        unit_norm_residual,
        translation_residual,
        column_sum_residual,
        passes,
    })
}

/// Largest posterior difference between `M` and `H M` at `n` seeded standard-normal points.
pub fn posterior_invariance(params: &GhmmParams, cert: &HouseholderCertificate, n: usize, seed: u64) -> f64 {
    let reflected = GhmmParams { means: cert.reflected_means.clone(), transition: params.transition.clone() };
    gaussian_points(params.d(), n, seed)
        .iter()
        .map(|x| (predictors::posterior_gaussian(params, x) - predictors::posterior_gaussian(&reflected, x)).amax())
        .fold(0.0, f64::max)
}

fn gaussian_points(d: usize, n: usize, seed: u64) -> Vec<Vector> {
    let mut rng = seeding::derived_rng(seed, 4);
    (0..n)
        .map(|_| {
            Vector::from_fn(d, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
        })
        .collect()
}

/// Number of Gaussian validation probes.
pub const GAUSSIAN_PROBES: usize = 200;
/// Largest d for exhaustive discrete probing.
pub const MAX_DISCRETE_PROBE_D: usize = 64;

#[derive(Debug, Clone, Serialize)]
pub struct TaskCheck {
    pub task: String,
    pub max_discrepancy: f64,
    pub probes: usize,
    /// Probes with zero probability under both models.
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleValidation {
    pub tolerance: f64,
    pub tasks: Vec<TaskCheck>,
    pub max_discrepancy: f64,
    /// min over permutations of sqrt(|O~ - O P|^2 + |T~ - P^T T P|^2).
    pub parameter_distance: f64,
    /// min over permutations of |O~ - O P| (emission or means only).
    pub emission_distance: f64,
    pub original_valid: bool,
    pub alternative_valid: bool,
    pub predictors_equal: bool,
    pub distinct: bool,
    pub passes: bool,
}

const DISTINCT_MIN: f64 = 1e-3;
const VALIDATION_TOL: f64 = 1e-8;

fn probe_inputs(model: &Model, task: &MaskedTask, seed: u64) -> Result<Vec<Vec<Observation>>, CounterexampleError> {
    let n = task.conditioned.len();
    Ok(match model {
        Model::Hmm(p) => {
            let d = p.d();
            if d > MAX_DISCRETE_PROBE_D {
                return Err(CounterexampleError::Structure(format!("d={d} exceeds {MAX_DISCRETE_PROBE_D} for exhaustive probing")));
            }
            (0..n).map(|_| 0..d).multi_cartesian_product().map(|v| v.into_iter().map(Observation::Discrete).collect()).collect()
        }
        Model::Ghmm(p) => gaussian_points(p.d() * n, GAUSSIAN_PROBES, seed)
            .into_iter()
            .map(|z| z.as_slice().chunks(p.d()).map(|c| Observation::Continuous(c.to_vec())).collect())
            .collect(),
    })
}

/// Checks predictor equality for every listed task and that the pair is not a relabeling.
pub fn validate_counterexample(pair: &CounterexamplePair, tolerance: f64, seed: u64) -> Result<CounterexampleValidation, CounterexampleError> {
    let (a, b) = (&pair.original, &pair.alternative);
    if a.kind() != b.kind() || a.observation_matrix().shape() != b.observation_matrix().shape() {
        return Err(CounterexampleError::Structure("pair members differ in class or shape".into()));
    }
    let mut tasks = Vec::new();
    for task in &pair.tasks {
        let mut worst = 0.0f64;
        let mut skipped = 0;
        let inputs = probe_inputs(a, task, seed)?;
        for obs in &inputs {
            match (predictors::predict(a, task, obs), predictors::predict(b, task, obs)) {
                (Ok(pa), Ok(pb)) => worst = worst.max(pa.max_abs_diff(&pb)),
                (Err(PredictError::Degenerate(_)), Err(PredictError::Degenerate(_))) => skipped += 1,
                (Err(PredictError::Degenerate(_)), Ok(_)) | (Ok(_), Err(PredictError::Degenerate(_))) => worst = f64::INFINITY,
                (Err(e), _) | (_, Err(e)) => return Err(e.into()),
            }
        }
        tasks.push(TaskCheck { task: task.to_string(), max_discrepancy: worst, probes: inputs.len() - skipped, skipped });
    }
    let max_discrepancy = tasks.iter().map(|t| t.max_discrepancy).fold(0.0, f64::max);
    let (parameter_distance, emission_distance) = permutation_distances(a, b);
    let original_valid = a.validate(VALIDATION_TOL)?.is_empty();
    let alternative_valid = b.validate(VALIDATION_TOL)?.is_empty();
    let predictors_equal = max_discrepancy <= tolerance;
    let distinct = parameter_distance >= DISTINCT_MIN;
    Ok(CounterexampleValidation {
        tolerance,
        tasks,
        max_discrepancy,
        parameter_distance,
        emission_distance,
        original_valid,
        alternative_valid,
        predictors_equal,
        distinct,
        passes: predictors_equal && distinct && original_valid && alternative_valid,
    })
}

fn permutation_distances(a: &Model, b: &Model) -> (f64, f64) {
    let k = a.k();
    let mut joint = f64::INFINITY;
    let mut emission = f64::INFINITY;
    for perm in (0..k).permutations(k) {
        let e = linalg::frob_diff(b.observation_matrix(), &linalg::permute_columns(a.observation_matrix(), &perm));
        let t = linalg::frob_diff(b.transition(), &linalg::permute_square(a.transition(), &perm));
        joint = joint.min((e * e + t * t).sqrt());
        emission = emission.min(e);
    }
    (joint, emission)
}
