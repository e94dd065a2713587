//! Small dense linear-algebra helpers shared by every module.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative singular-value threshold used for rank decisions and pseudo-inverses.
pub const RANK_RTOL: f64 = 1e-10;

/// Singular values in descending order.
pub fn singular_values(a: &Mat) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Numerical rank: number of singular values above `rtol * sigma_max`.
pub fn numerical_rank(a: &Mat, rtol: f64) -> usize {
    let s = singular_values(a);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&v| v > rtol * smax).count(),
        _ => 0,
    }
}

/// Moore-Penrose pseudo-inverse, truncating singular values below `RANK_RTOL * sigma_max`.
pub fn pinv(a: &Mat) -> Mat {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Mat::zeros(n, m);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = RANK_RTOL * smax;
    let mut out = Mat::zeros(n, m);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            out += (vt.row(i).transpose() / s) * u.column(i).transpose();
        }
    }
    out
}

/// Smallest over largest singular value, 0 for empty or zero matrices.
pub fn inverse_condition(a: &Mat) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if hi > 0.0 => lo / hi,
        _ => 0.0,
    }
}

/// `t^n` by repeated multiplication; `t^0 = I`.
pub fn mat_pow(t: &Mat, n: usize) -> Mat {
    let mut out = Mat::identity(t.nrows(), t.ncols());
    for _ in 0..n {
        out = &out * t;
    }
    out
}

/// Largest absolute entry.
pub fn max_abs(a: &Mat) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Largest absolute entrywise difference.
pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn column_sums(a: &Mat) -> Vec<f64> {
    a.column_iter().map(|c| c.sum()).collect()
}

pub fn row_sums(a: &Mat) -> Vec<f64> {
    a.row_iter().map(|r| r.sum()).collect()
}

/// Divides every column by its sum.
pub fn normalize_column_sums(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut c in out.column_iter_mut() {
        let s = c.sum();
        c /= s;
    }
    out
}

/// Divides every column by its Euclidean norm.
pub fn normalize_column_norms(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut c in out.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    out
}

/// Volume of the column set: product of singular values. Equals |det| for square input.
pub fn gram_volume(a: &Mat) -> f64 {
    singular_values(a).iter().product()
}

/// Builds a matrix from row-major nested rows; `None` on ragged input.
pub fn from_rows(rows: &[Vec<f64>]) -> Option<Mat> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return None;
    }
    Some(Mat::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn to_rows(a: &Mat) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Unit null vector of a square (or tall) matrix: right singular vector of the smallest
/// singular value.
pub fn null_vector(a: &Mat) -> Vector {
    let svd = a.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .unwrap();
    vt.row(idx).transpose()
}

/// Result of a real eigendecomposition attempt.
#[derive(Debug, Clone)]
pub struct RealEigen {
    pub values: Vec<f64>,
    /// Unit eigenvectors as columns, ordered like `values`.
    pub vectors: Mat,
    /// Largest imaginary part relative to the largest eigenvalue modulus.
    pub imag_mass: f64,
}

/// Eigenvalues via the real Schur form, eigenvectors via null vectors of `a - lambda I`.
/// Imaginary parts are reported, not discarded silently.
pub fn real_eigen(a: &Mat) -> RealEigen {
    let n = a.nrows();
    if n == 1 {
        return RealEigen { values: vec![a[(0, 0)]], vectors: Mat::from_element(1, 1, 1.0), imag_mass: 0.0 };
    }
    let ev = a.complex_eigenvalues();
    let scale = ev.iter().fold(0.0f64, |m, z| m.max(z.norm())).max(f64::MIN_POSITIVE);
    let imag_mass = ev.iter().fold(0.0f64, |m, z| m.max(z.im.abs())) / scale;
    let mut values: Vec<f64> = ev.iter().map(|z| z.re).collect();
    values.sort_by(|x, y| x.total_cmp(y));
    let mut vectors = Mat::zeros(n, n);
    for (j, &lam) in values.iter().enumerate() {
        let shifted = a - Mat::identity(n, n) * lam;
        vectors.set_column(j, &null_vector(&shifted));
    }
    RealEigen { values, vectors, imag_mass }
}

/// Minimum pairwise gap of a set of reals, relative to the largest modulus.
pub fn relative_min_gap(values: &[f64]) -> f64 {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut gap = f64::INFINITY;
    for i in 0..values.len() {
        for j in (i + 1)..values.len() {
            gap = gap.min((values[i] - values[j]).abs());
        }
    }
    gap / scale
}

/// Frobenius norm of a - b.
pub fn frob_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm()
}

/// Permutes columns: output column j is input column perm[j].
pub fn permute_columns(a: &Mat, perm: &[usize]) -> Mat {
    Mat::from_fn(a.nrows(), perm.len(), |i, j| a[(i, perm[j])])
}

/// Relabels a square transition-like matrix: out[i][j] = a[perm[i]][perm[j]].
pub fn permute_square(a: &Mat, perm: &[usize]) -> Mat {
    Mat::from_fn(perm.len(), perm.len(), |i, j| a[(perm[i], perm[j])])
}
