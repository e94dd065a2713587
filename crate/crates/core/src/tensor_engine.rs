//! Dense order-3 tensors, Kruskal rank, Jennrich decomposition and column alignment.

use crate::linalg::{self, Mat, Vector};
use crate::seeding;
use itertools::Itertools;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("size limit: {0}")]
    SizeLimit(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("mode-{mode} unfolding has numerical rank {rank} < {r}")]
    RankDeficient { mode: usize, rank: usize, r: usize },
    #[error("decomposition degenerate after {attempts} attempts: {reason}")]
    Degenerate { attempts: usize, reason: String },
}

/// Dense tensor stored row-major with the first index slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Tensor3Json", into = "Tensor3Json")]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor3Json {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl TryFrom<Tensor3Json> for Tensor3 {
    type Error = TensorError;
    fn try_from(j: Tensor3Json) -> Result<Self, TensorError> {
        Tensor3::new(j.dims, j.data)
    }
}

impl From<Tensor3> for Tensor3Json {
    fn from(t: Tensor3) -> Self {
        Tensor3Json { dims: t.dims, data: t.data }
    }
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self, TensorError> {
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(TensorError::Shape(format!("dims {dims:?} need {n} entries, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Shape("tensor has non-finite entries".into()));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Tensor3 { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn idx(&self, i: usize, j: usize, l: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + l
    }

    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[self.idx(i, j, l)]
    }

    /// Adds `w * a ⊗ b ⊗ c`.
    pub fn add_outer(&mut self, w: f64, a: &Vector, b: &Vector, c: &Vector) {
        assert_eq!([a.len(), b.len(), c.len()], self.dims);
        for i in 0..self.dims[0] {
            let wa = w * a[i];
            if wa == 0.0 {
                continue;
            }
            for j in 0..self.dims[1] {
                let wab = wa * b[j];
                let base = self.idx(i, j, 0);
                for l in 0..self.dims[2] {
                    self.data[base + l] += wab * c[l];
                }
            }
        }
    }

    /// Adds `w * a ⊗ m` for a vector `a` and an n2 x n3 matrix `m`.
    pub fn add_vector_matrix(&mut self, w: f64, a: &Vector, m: &Mat) {
        assert_eq!(a.len(), self.dims[0]);
        assert_eq!(m.shape(), (self.dims[1], self.dims[2]));
        for i in 0..self.dims[0] {
            let wa = w * a[i];
            if wa == 0.0 {
                continue;
            }
            for j in 0..self.dims[1] {
                let base = self.idx(i, j, 0);
                for l in 0..self.dims[2] {
                    self.data[base + l] += wa * m[(j, l)];
                }
            }
        }
    }

    /// Sum of rank-one terms `A_i ⊗ B_i ⊗ C_i`.
    pub fn from_factors(a: &Mat, b: &Mat, c: &Mat) -> Result<Self, TensorError> {
        let r = a.ncols();
        if b.ncols() != r || c.ncols() != r {
            return Err(TensorError::Shape("factors must share the column count".into()));
        }
        let mut t = Tensor3::zeros([a.nrows(), b.nrows(), c.nrows()]);
        for q in 0..r {
            t.add_outer(1.0, &a.column(q).into(), &b.column(q).into(), &c.column(q).into());
        }
        Ok(t)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    /// Mode-m unfolding (m in 1..=3): rows index mode m, columns the other two modes with
    /// the later mode fastest.
    pub fn unfold(&self, mode: usize) -> Mat {
        let [n1, n2, n3] = self.dims;
        match mode {
            1 => Mat::from_fn(n1, n2 * n3, |i, c| self.get(i, c / n3, c % n3)),
            2 => Mat::from_fn(n2, n1 * n3, |j, c| self.get(c / n3, j, c % n3)),
            3 => Mat::from_fn(n3, n1 * n2, |l, c| self.get(c / n2, c % n2, l)),
            _ => panic!("mode must be 1, 2 or 3"),
        }
    }

    /// `sum_i u_i T(i, :, :)`, an n2 x n3 matrix.
    pub fn contract_mode1(&self, u: &Vector) -> Mat {
        let [n1, n2, n3] = self.dims;
        let mut m = Mat::zeros(n2, n3);
        for i in 0..n1 {
            for j in 0..n2 {
                for l in 0..n3 {
                    m[(j, l)] += u[i] * self.get(i, j, l);
                }
            }
        }
        m
    }
}

/// Canonical polyadic decomposition `sum_q A_q ⊗ B_q ⊗ C_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cpd {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub r: usize,
    /// Frobenius norm of the reconstruction error.
    pub residual: f64,
    /// Relative eigenvalue gap of the accepted slice mixture.
    pub eigengap: f64,
    /// Number of reseeded retries used.
    pub retries: usize,
}

impl Cpd {
    pub fn reconstruct(&self) -> Tensor3 {
        Tensor3::from_factors(&self.a, &self.b, &self.c).expect("factors share r")
    }
}

const KRUSKAL_MAX_COLUMNS: usize = 12;
const KRUSKAL_RTOL: f64 = 1e-9;

/// Largest kappa such that every kappa columns are linearly independent. Columns are scaled
/// to unit norm, so the singular-value test is relative to the column scale.
pub fn kruskal_rank(m: &Mat) -> Result<usize, TensorError> {
    let r = m.ncols();
    if r > KRUSKAL_MAX_COLUMNS {
        return Err(TensorError::SizeLimit(format!("kruskal_rank supports at most {KRUSKAL_MAX_COLUMNS} columns, got {r}")));
    }
    let norms: Vec<f64> = m.column_iter().map(|c| c.norm()).collect();
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    if r == 0 || scale == 0.0 || norms.iter().any(|&n| n <= KRUSKAL_RTOL * scale) {
        return Ok(0);
    }
    let unit = linalg::normalize_column_norms(m);
    for kappa in 1..=r {
        for subset in (0..r).combinations(kappa) {
            let sub = Mat::from_fn(m.nrows(), kappa, |i, j| unit[(i, subset[j])]);
            let s = linalg::singular_values(&sub);
            let smin = if s.len() < kappa { 0.0 } else { s[kappa - 1] };
            if smin <= KRUSKAL_RTOL {
                return Ok(kappa - 1);
            }
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KruskalCheck {
    pub holds: bool,
    /// k_A + k_B + k_C - (2r + 2).
    pub slack: i64,
    pub ranks: [usize; 3],
}

/// Kruskal's uniqueness condition `k_A + k_B + k_C >= 2r + 2`.
pub fn kruskal_condition(a: &Mat, b: &Mat, c: &Mat) -> Result<KruskalCheck, TensorError> {
    let r = a.ncols();
    if b.ncols() != r || c.ncols() != r {
        return Err(TensorError::Shape("factors must share the column count".into()));
    }
    let ranks = [kruskal_rank(a)?, kruskal_rank(b)?, kruskal_rank(c)?];
    let slack = ranks.iter().sum::<usize>() as i64 - (2 * r as i64 + 2);
    Ok(KruskalCheck { holds: slack >= 0, slack, ranks })
}

const JENNRICH_RETRIES: usize = 5;
const EIGENGAP_MIN: f64 = 1e-8;
const IMAG_MAX: f64 = 1e-8;
const PAIRING_RTOL: f64 = 1e-6;

fn top_left_singular(m: &Mat, r: usize) -> Mat {
    let svd = m.clone().svd(true, false);
    let u = svd.u.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    Mat::from_fn(m.nrows(), r, |i, j| u[(i, order[j])])
}

/// Checks the numerical rank of every unfolding against `r`.
pub fn check_multilinear_rank(t: &Tensor3, r: usize) -> Result<(), TensorError> {
    for mode in 1..=3 {
        let rank = linalg::numerical_rank(&t.unfold(mode), linalg::RANK_RTOL);
        if rank < r {
            return Err(TensorError::RankDeficient { mode, rank, r });
        }
    }
    Ok(())
}

/// Pairs eigenvalue lists by reciprocity: returns `perm` with `lam[i] * mu[perm[i]] ≈ 1`.
fn pair_reciprocal(lam: &[f64], mu: &[f64]) -> Option<Vec<usize>> {
    let mut used = vec![false; mu.len()];
    let mut perm = Vec::with_capacity(lam.len());
    for &l in lam {
        let (j, err) = mu
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, &m)| (j, (l * m - 1.0).abs()))
            .min_by(|x, y| x.1.total_cmp(&y.1))?;
        if err > PAIRING_RTOL {
            return None;
        }
        used[j] = true;
        perm.push(j);
    }
    Some(perm)
}

/// Simultaneous-diagonalization CP decomposition with `r` components.
///
/// Modes 2 and 3 are whitened onto their top-r singular subspaces, two random mode-1 slice
/// mixtures `W1`, `W2` are formed, and the eigenvectors of `W1 W2^-1` (mode 2) and of
/// `(W1^-1 W2)^T` (mode 3) are paired through their reciprocal eigenvalues. The mode-1
/// factor is then the least-squares solution against the Khatri-Rao product.
pub fn jennrich(t: &Tensor3, r: usize, seed: u64) -> Result<Cpd, TensorError> {
    let [n1, n2, n3] = t.dims();
    if r == 0 || r > n2 || r > n3 || r > n1 {
        return Err(TensorError::Shape(format!("rank {r} incompatible with dims {:?}", t.dims())));
    }
    check_multilinear_rank(t, r)?;
    let u2 = top_left_singular(&t.unfold(2), r);
    let u3 = top_left_singular(&t.unfold(3), r);
    let mut last_reason = String::new();
    for attempt in 0..=JENNRICH_RETRIES {
        let mut rng = seeding::derived_rng(seed, attempt as u64);
        let u = Vector::from_fn(n1, |_, _| StandardNormal.sample(&mut rng));
        let v = Vector::from_fn(n1, |_, _| StandardNormal.sample(&mut rng));
        let w1 = u2.transpose() * t.contract_mode1(&u) * &u3;
        let w2 = u2.transpose() * t.contract_mode1(&v) * &u3;
        let (Some(w1i), Some(w2i)) = (w1.clone().try_inverse(), w2.clone().try_inverse()) else {
            last_reason = "singular slice mixture".into();
            continue;
        };
        if linalg::inverse_condition(&w1) < 1e-13 || linalg::inverse_condition(&w2) < 1e-13 {
            last_reason = "ill-conditioned slice mixture".into();
            continue;
        }
        let e_b = linalg::real_eigen(&(&w1 * &w2i));
        let e_c = linalg::real_eigen(&(&w1i * &w2).transpose());
        let imag = e_b.imag_mass.max(e_c.imag_mass);
        if imag > IMAG_MAX {
            last_reason = format!("complex eigenvalues (imaginary mass {imag:.2e})");
            continue;
        }
        let gap = linalg::relative_min_gap(&e_b.values);
        if gap < EIGENGAP_MIN {
            last_reason = format!("eigengap {gap:.2e} below {EIGENGAP_MIN:.0e}");
            continue;
        }
        let Some(perm) = pair_reciprocal(&e_b.values, &e_c.values) else {
            last_reason = "eigenvalues of the two products are not reciprocal".into();
            continue;
        };
        let b = linalg::normalize_column_norms(&(&u2 * &e_b.vectors));
        let c = linalg::normalize_column_norms(&(&u3 * linalg::permute_columns(&e_c.vectors, &perm)));
        let kr = Mat::from_fn(n2 * n3, r, |row, q| b[(row / n3, q)] * c[(row % n3, q)]);
        let a = t.unfold(1) * linalg::pinv(&kr.transpose());
        let mut cpd = Cpd { a, b, c, r, residual: 0.0, eigengap: gap, retries: attempt };
        cpd.residual = t.distance(&cpd.reconstruct());
        return Ok(cpd);
    }
    Err(TensorError::Degenerate { attempts: JENNRICH_RETRIES + 1, reason: last_reason })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `perm[j]` is the candidate column matched to reference column j.
    pub permutation: Vec<usize>,
    /// Per-column factor s_j with candidate column ≈ s_j * reference column.
    pub scalings: Vec<f64>,
    /// Frobenius norm of `candidate[:, perm] - reference * diag(s)`.
    pub residual: f64,
}

const ALIGN_MAX_COLUMNS: usize = 8;

/// Exhaustive search over column permutations (and optional least-squares scalings or signs)
/// minimizing the Frobenius residual.
pub fn align_columns(reference: &Mat, candidate: &Mat, allow_scaling: bool, allow_sign: bool) -> Result<Alignment, TensorError> {
    let k = reference.ncols();
    if k > ALIGN_MAX_COLUMNS {
        return Err(TensorError::SizeLimit(format!("align_columns supports at most {ALIGN_MAX_COLUMNS} columns, got {k}")));
    }
    if candidate.shape() != reference.shape() {
        return Err(TensorError::Shape(format!(
            "reference is {:?} but candidate is {:?}",
            reference.shape(),
            candidate.shape()
        )));
    }
    // cost[j][c]: best residual^2 and scale pairing reference column j with candidate column c.
    let mut cost = vec![vec![(0.0, 1.0); k]; k];
    for j in 0..k {
        let r = reference.column(j);
        for c in 0..k {
            let x = candidate.column(c);
            let rr = r.norm_squared();
            let s = if allow_scaling {
                if rr > 0.0 { r.dot(&x) / rr } else { 0.0 }
            } else if allow_sign && r.dot(&x) < 0.0 {
                -1.0
            } else {
                1.0
            };
            cost[j][c] = ((x - r * s).norm_squared(), s);
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..k).permutations(k) {
        let total: f64 = perm.iter().enumerate().map(|(j, &c)| cost[j][c].0).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    let (total, permutation) = best.unwrap_or((0.0, Vec::new()));
    let scalings = permutation.iter().enumerate().map(|(j, &c)| cost[j][c].1).collect();
    Ok(Alignment { permutation, scalings, residual: total.sqrt() })
}
