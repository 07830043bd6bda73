//! Numerical kernels: Cholesky factorization, triangular solves, a
//! one-sided Jacobi singular value decomposition, and an entropy-based
//! effective rank.
//!
//! Everything here is deterministic: no randomized pivoting, no
//! parallel reductions, and fixed iteration orders, so repeated runs on the
//! same input produce bit-identical results.

use crate::tensor::{Matrix, TensorError};
use std::fmt;

/// Relative off-diagonal threshold below which a Jacobi rotation is skipped.
const JACOBI_TOL: f64 = 1e-12;
/// Hard cap on full Jacobi sweeps before reporting non-convergence.
const JACOBI_MAX_SWEEPS: usize = 60;
/// Default smoothing constant added inside the logarithm of the spectral
/// entropy, keeping the effective rank defined for spectra with tiny values.
pub const EFFECTIVE_RANK_EPSILON: f64 = 1e-12;

#[derive(Debug)]
pub enum LinalgError {
    NotSquare { op: &'static str, rows: usize, cols: usize },
    /// Cholesky pivot `pivot` came out as `value` (must be positive).
    NotPositiveDefinite { pivot: usize, value: f64 },
    /// A triangular solve hit an exactly-zero diagonal entry.
    SingularDiagonal { op: &'static str, index: usize },
    /// Jacobi sweeps exhausted; `residual` is the largest relative
    /// off-diagonal coupling seen in the final sweep.
    NoConvergence { sweeps: usize, residual: f64 },
    /// Effective rank of an empty spectrum is undefined.
    EmptySpectrum,
    NegativeSigma { index: usize, value: f64 },
    /// Every singular value is zero, so the probability weights are undefined.
    AllZeroSigma,
    InvalidEpsilon { value: f64 },
    InvalidRidge { value: f64 },
    Tensor(TensorError),
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinalgError::NotSquare { op, rows, cols } => {
                write!(f, "{op}: matrix must be square, got {rows}x{cols}")
            }
            LinalgError::NotPositiveDefinite { pivot, value } => write!(
                f,
                "matrix is not positive definite: pivot {pivot} has value {value:e}"
            ),
            LinalgError::SingularDiagonal { op, index } => {
                write!(f, "{op}: zero diagonal entry at index {index}")
            }
            LinalgError::NoConvergence { sweeps, residual } => write!(
                f,
                "jacobi svd did not converge after {sweeps} sweeps (residual {residual:e})"
            ),
            LinalgError::EmptySpectrum => write!(f, "effective rank of an empty spectrum"),
            LinalgError::NegativeSigma { index, value } => {
                write!(f, "singular value {index} is negative ({value:e})")
            }
            LinalgError::AllZeroSigma => write!(f, "effective rank of an all-zero spectrum"),
            LinalgError::InvalidEpsilon { value } => {
                write!(f, "entropy smoothing constant must be finite and >= 0, got {value:e}")
            }
            LinalgError::InvalidRidge { value } => {
                write!(f, "ridge must be finite and >= 0, got {value:e}")
            }
            LinalgError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

// Display already embeds the full wrapped message; see TensorError.
impl std::error::Error for LinalgError {}

impl From<TensorError> for LinalgError {
    fn from(e: TensorError) -> Self {
        LinalgError::Tensor(e)
    }
}

/// Sums a slice by recursive halving. The balanced tree keeps rounding error
/// at O(log n) and, unlike sequential accumulation, adds equal-magnitude
/// partial sums, which several exactness-sensitive callers rely on.
pub(crate) fn pairwise_sum(x: &[f64]) -> f64 {
    match x.len() {
        0 => 0.0,
        1 => x[0],
        2 => x[0] + x[1],
        n => {
            let (lo, hi) = x.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// Lower-triangular Cholesky factor `L` of `g + ridge * I`, so that
/// `L * L^T = g + ridge * I`. Only the lower triangle of `g` is read; the
/// caller is responsible for symmetry. Fails with the pivot index and value
/// on the first non-positive pivot.
pub fn cholesky_lower(g: &Matrix, ridge: f64) -> Result<Matrix, LinalgError> {
    if g.rows() != g.cols() {
        return Err(LinalgError::NotSquare {
            op: "cholesky_lower",
            rows: g.rows(),
            cols: g.cols(),
        });
    }
    if !ridge.is_finite() || ridge < 0.0 {
        return Err(LinalgError::InvalidRidge { value: ridge });
    }
    let n = g.rows();
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let mut d = g.get(j, j) + ridge;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
        }
        let pivot = d.sqrt();
        l[j * n + j] = pivot;
        for i in (j + 1)..n {
            let mut v = g.get(i, j);
            for k in 0..j {
                v -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = v / pivot;
        }
    }
    Ok(Matrix::from_vec(n, n, l)?)
}

/// Solves `L * Y = B` for `Y` by forward substitution, where `L` is lower
/// triangular. This is how `L^-1 * B` is applied everywhere in this crate;
/// the inverse itself is never formed.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if l.rows() != l.cols() {
        return Err(LinalgError::NotSquare { op: "solve_lower", rows: l.rows(), cols: l.cols() });
    }
    if l.cols() != b.rows() {
        return Err(LinalgError::Tensor(TensorError::ShapeMismatch {
            op: "solve_lower",
            left: l.shape(),
            right: b.shape(),
        }));
    }
    let n = l.rows();
    let k = b.cols();
    let mut y = b.data().to_vec();
    for j in 0..n {
        let diag = l.get(j, j);
        if diag == 0.0 {
            return Err(LinalgError::SingularDiagonal { op: "solve_lower", index: j });
        }
        let (above, current) = y.split_at_mut(j * k);
        let row = &mut current[..k];
        for p in 0..j {
            let coeff = l.get(j, p);
            if coeff == 0.0 {
                continue;
            }
            let prior = &above[p * k..(p + 1) * k];
            for (r, v) in row.iter_mut().zip(prior) {
                *r -= coeff * v;
            }
        }
        for r in row.iter_mut() {
            *r /= diag;
        }
    }
    Ok(Matrix::from_vec(n, k, y)?)
}

/// Solves `Y * L = B` for `Y`, where `L` is lower triangular. This applies
/// `B * L^-1` from the right, again without materializing the inverse.
pub fn solve_right_lower(b: &Matrix, l: &Matrix) -> Result<Matrix, LinalgError> {
    if l.rows() != l.cols() {
        return Err(LinalgError::NotSquare {
            op: "solve_right_lower",
            rows: l.rows(),
            cols: l.cols(),
        });
    }
    if b.cols() != l.rows() {
        return Err(LinalgError::Tensor(TensorError::ShapeMismatch {
            op: "solve_right_lower",
            left: b.shape(),
            right: l.shape(),
        }));
    }
    let n = l.rows();
    let rows = b.rows();
    let mut y = b.data().to_vec();
    // Column j of Y*L only involves Y columns j..n because L is lower
    // triangular, so back-substitute from the last column toward the first.
    for j in (0..n).rev() {
        let diag = l.get(j, j);
        if diag == 0.0 {
            return Err(LinalgError::SingularDiagonal { op: "solve_right_lower", index: j });
        }
        for i in 0..rows {
            let mut v = y[i * n + j];
            for k in (j + 1)..n {
                v -= y[i * n + k] * l.get(k, j);
            }
            y[i * n + j] = v / diag;
        }
    }
    Ok(Matrix::from_vec(rows, n, y)?)
}

/// Thin singular value decomposition `A = U * diag(sigma) * V^T`.
///
/// `u` is `rows x k`, `sigma` has `k` non-negative entries sorted
/// descending, and `vt` is `k x cols`, with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

/// One-sided Jacobi SVD.
///
/// Columns of a working copy are rotated in cyclic sweeps until every pair
/// is orthogonal to relative tolerance 1e-12; singular values are the final
/// column norms. Exactly-zero singular values get their left singular
/// vectors completed from canonical basis vectors, so `u` always has
/// orthonormal columns. Every column of `u` is signed so its first nonzero
/// entry is positive, giving a canonical, reproducible decomposition.
pub fn svd(a: &Matrix) -> Result<SvdResult, LinalgError> {
    let mut out = if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose())?;
        SvdResult { u: t.vt.transpose(), sigma: t.sigma, vt: t.u.transpose() }
    } else {
        svd_tall(a)?
    };
    normalize_signs(&mut out);
    Ok(out)
}

/// Jacobi iteration for `rows >= cols`.
fn svd_tall(a: &Matrix) -> Result<SvdResult, LinalgError> {
    let m = a.rows();
    let n = a.cols();
    debug_assert!(m >= n);

    // Column-major working copies: rotations touch contiguous memory.
    let mut b = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            b[j * m + i] = a.get(i, j);
        }
    }
    let mut v = vec![0.0f64; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let mut converged = n < 2;
    let mut last_residual = 0.0f64;
    let mut sweeps_used = 0;
    while !converged && sweeps_used < JACOBI_MAX_SWEEPS {
        sweeps_used += 1;
        let mut rotated = false;
        let mut residual = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let (app, aqq, apq) = column_couplings(&b, m, p, q);
                if app == 0.0 || aqq == 0.0 {
                    continue;
                }
                let norm_product = app.sqrt() * aqq.sqrt();
                residual = residual.max(apq.abs() / norm_product);
                if apq.abs() <= JACOBI_TOL * norm_product {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut b, m, p, q, c, s);
                rotate_columns(&mut v, n, p, q, c, s);
            }
        }
        last_residual = residual;
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::NoConvergence { sweeps: sweeps_used, residual: last_residual });
    }

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| {
            let col = &b[j * m..(j + 1) * m];
            col.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap().then(x.cmp(&y)));
    sigma = order.iter().map(|&j| sigma[j]).collect();

    let mut u = vec![0.0f64; m * n];
    for (j_new, &j_old) in order.iter().enumerate() {
        if sigma[j_new] > 0.0 {
            let col = &b[j_old * m..(j_old + 1) * m];
            for i in 0..m {
                u[i * n + j_new] = col[i] / sigma[j_new];
            }
        }
    }
    for j_new in 0..n {
        if sigma[j_new] == 0.0 {
            complete_column(&mut u, m, n, j_new);
        }
    }

    let mut vt = vec![0.0f64; n * n];
    for (j_new, &j_old) in order.iter().enumerate() {
        for i in 0..n {
            vt[j_new * n + i] = v[j_old * n + i];
        }
    }

    Ok(SvdResult {
        u: Matrix::from_vec(m, n, u)?,
        sigma,
        vt: Matrix::from_vec(n, n, vt)?,
    })
}

/// Squared norms of columns `p` and `q` and their inner product.
fn column_couplings(b: &[f64], m: usize, p: usize, q: usize) -> (f64, f64, f64) {
    let cp = &b[p * m..(p + 1) * m];
    let cq = &b[q * m..(q + 1) * m];
    let mut app = 0.0;
    let mut aqq = 0.0;
    let mut apq = 0.0;
    for (x, y) in cp.iter().zip(cq) {
        app += x * x;
        aqq += y * y;
        apq += x * y;
    }
    (app, aqq, apq)
}

/// Applies the plane rotation `[c -s; s c]` to columns `p` and `q`.
fn rotate_columns(b: &mut [f64], m: usize, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = if p < q { (p, q) } else { (q, p) };
    let (head, tail) = b.split_at_mut(hi * m);
    let col_lo = &mut head[lo * m..(lo + 1) * m];
    let col_hi = &mut tail[..m];
    let (cp, cq) = if p < q { (col_lo, col_hi) } else { (col_hi, col_lo) };
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let bp = *x;
        let bq = *y;
        *x = c * bp - s * bq;
        *y = s * bp + c * bq;
    }
}

/// Fills column `j` of the row-major `m x n` matrix `u` with a unit vector
/// orthogonal to all other columns: the canonical basis vector whose
/// residual after two rounds of Gram-Schmidt is largest (ties to the lower
/// index) is normalized into place.
fn complete_column(u: &mut [f64], m: usize, n: usize, j: usize) {
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for candidate in 0..m {
        let mut vec = vec![0.0f64; m];
        vec[candidate] = 1.0;
        for _pass in 0..2 {
            for col in 0..n {
                if col == j {
                    continue;
                }
                let mut dot = 0.0;
                for i in 0..m {
                    dot += vec[i] * u[i * n + col];
                }
                if dot != 0.0 {
                    for i in 0..m {
                        vec[i] -= dot * u[i * n + col];
                    }
                }
            }
        }
        let norm = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
        if best.as_ref().map_or(true, |(b_norm, _, _)| norm > *b_norm) {
            best = Some((norm, candidate, vec));
        }
    }
    let (norm, _, vec) = best.expect("m >= n >= 1 guarantees at least one candidate");
    debug_assert!(norm > 0.0, "cannot complete an orthonormal basis");
    for i in 0..m {
        u[i * n + j] = vec[i] / norm;
    }
}

/// Flips signs so the first nonzero entry of each `u` column is positive,
/// negating the matching `vt` row to preserve the product.
fn normalize_signs(out: &mut SvdResult) {
    let m = out.u.rows();
    let k = out.u.cols();
    let n = out.vt.cols();
    let mut u = out.u.data().to_vec();
    let mut vt = out.vt.data().to_vec();
    for j in 0..k {
        let first = (0..m).map(|i| u[i * k + j]).find(|x| *x != 0.0);
        if let Some(lead) = first {
            if lead < 0.0 {
                for i in 0..m {
                    u[i * k + j] = -u[i * k + j];
                }
                for i in 0..n {
                    vt[j * n + i] = -vt[j * n + i];
                }
            }
        }
    }
    out.u = Matrix::from_vec(m, k, u).expect("sign flip preserves validity");
    out.vt = Matrix::from_vec(k, n, vt).expect("sign flip preserves validity");
}

/// Exponentiated spectral entropy of a singular value spectrum:
/// `exp(-sum_k p_k * ln(p_k + epsilon))` with `p_k = sigma_k / sum(sigma)`.
///
/// A flat spectrum of length `n` scores `n`; a single dominant direction
/// scores near 1. Entries must be non-negative with a positive total.
/// Zero-probability terms contribute exactly zero. The entropy terms are
/// combined with balanced pairwise summation, so flat spectra of
/// power-of-two length evaluate exactly.
pub fn effective_rank(sigma: &[f64], epsilon: f64) -> Result<f64, LinalgError> {
    if sigma.is_empty() {
        return Err(LinalgError::EmptySpectrum);
    }
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(LinalgError::InvalidEpsilon { value: epsilon });
    }
    for (index, &s) in sigma.iter().enumerate() {
        if s < 0.0 {
            return Err(LinalgError::NegativeSigma { index, value: s });
        }
    }
    let total = pairwise_sum(sigma);
    if total == 0.0 {
        return Err(LinalgError::AllZeroSigma);
    }
    let terms: Vec<f64> = sigma
        .iter()
        .map(|&s| {
            let p = s / total;
            if p == 0.0 {
                0.0
            } else {
                p * (p + epsilon).ln()
            }
        })
        .collect();
    Ok((-pairwise_sum(&terms)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Vector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Independent oracle: two-sided Jacobi eigenvalue iteration for a
    /// symmetric matrix, returning eigenvalues sorted descending.
    fn symmetric_eigenvalues(g: &Matrix) -> Vec<f64> {
        assert_eq!(g.rows(), g.cols());
        let n = g.rows();
        let mut a = g.data().to_vec();
        for _ in 0..200 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in (p + 1)..n {
                    off = off.max(a[p * n + q].abs());
                }
            }
            let scale = (0..n).map(|i| a[i * n + i].abs()).fold(1e-300, f64::max);
            if off <= 1e-14 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (1.0 + theta * theta).sqrt())
                    } else {
                        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..n {
                        let aip = a[i * n + p];
                        let aiq = a[i * n + q];
                        a[i * n + p] = c * aip - s * aiq;
                        a[i * n + q] = s * aip + c * aiq;
                    }
                    for jj in 0..n {
                        let apj = a[p * n + jj];
                        let aqj = a[q * n + jj];
                        a[p * n + jj] = c * apj - s * aqj;
                        a[q * n + jj] = s * apj + c * aqj;
                    }
                }
            }
        }
        let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        eig
    }

    fn reconstruct(r: &SvdResult) -> Matrix {
        let k = r.sigma.len();
        let scaled = r.u.scale_cols(&Vector::from_vec(r.sigma.clone()).unwrap()).unwrap();
        assert_eq!(scaled.cols(), k);
        scaled.matmul(&r.vt).unwrap()
    }

    fn assert_orthonormal_columns(m: &Matrix, tol: f64) {
        let gram = m.transpose().gram();
        let dev = gram.sub(&Matrix::identity(m.cols())).unwrap().max_abs();
        assert!(dev <= tol, "orthonormality deviation {dev:e}");
    }

    #[test]
    fn pairwise_sum_base_cases_and_equal_blocks() {
        assert_eq!(pairwise_sum(&[]), 0.0);
        assert_eq!(pairwise_sum(&[1.5]), 1.5);
        assert_eq!(pairwise_sum(&[1.5, 2.5]), 4.0);
        // Four equal values sum exactly: (t+t)+(t+t) only shifts exponents.
        let t = 0.1f64;
        assert_eq!(pairwise_sum(&[t, t, t, t]).to_bits(), (4.0 * t).to_bits());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xs: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seq: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - seq).abs() <= 1e-12);
    }

    #[test]
    fn cholesky_hand_example_is_exact() {
        let g = Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]).unwrap();
        let l = cholesky_lower(&g, 0.0).unwrap();
        assert_eq!(l.get(0, 0), 2.0);
        assert_eq!(l.get(0, 1), 0.0);
        assert_eq!(l.get(1, 0), 1.0);
        assert_eq!(l.get(1, 1).to_bits(), 2.0f64.sqrt().to_bits());
    }

    #[test]
    fn cholesky_of_identity_is_identity() {
        let l = cholesky_lower(&Matrix::identity(5), 0.0).unwrap();
        assert_eq!(l, Matrix::identity(5));
    }

    #[test]
    fn cholesky_reports_first_bad_pivot_exactly() {
        // Rows (1,0), (0,1), (1,1), (2,-1): integer Gram matrix of rank 2,
        // so the third pivot vanishes with no rounding involved.
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]]).unwrap();
        let err = cholesky_lower(&x.gram(), 0.0).unwrap_err();
        match err {
            LinalgError::NotPositiveDefinite { pivot, value } => {
                assert_eq!(pivot, 2);
                assert_eq!(value, 0.0);
            }
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_ridge_rescues_rank_deficiency() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]]).unwrap();
        let g = x.gram();
        let ridge = 1e-6;
        let l = cholesky_lower(&g, ridge).unwrap();
        let mut target = g.clone();
        target = target
            .add(&Matrix::from_vec(4, 4, {
                let mut d = vec![0.0; 16];
                for i in 0..4 {
                    d[i * 4 + i] = ridge;
                }
                d
            })
            .unwrap())
            .unwrap();
        let recon = l.matmul(&l.transpose()).unwrap();
        assert!(recon.sub(&target).unwrap().max_abs() <= 1e-12 * target.trace());
    }

    #[test]
    fn cholesky_reconstructs_random_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let g = random_matrix(&mut rng, 8, 20).gram();
            let l = cholesky_lower(&g, 0.0).unwrap();
            let recon = l.matmul(&l.transpose()).unwrap();
            assert!(recon.sub(&g).unwrap().max_abs() <= 1e-12 * g.trace());
            // Strictly lower-triangular structure.
            for i in 0..8 {
                for j in (i + 1)..8 {
                    assert_eq!(l.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn cholesky_rejects_bad_inputs() {
        assert!(matches!(
            cholesky_lower(&Matrix::zeros(2, 3), 0.0).unwrap_err(),
            LinalgError::NotSquare { .. }
        ));
        assert!(matches!(
            cholesky_lower(&Matrix::identity(2), -1.0).unwrap_err(),
            LinalgError::InvalidRidge { .. }
        ));
        assert!(matches!(
            cholesky_lower(&Matrix::identity(2), f64::NAN).unwrap_err(),
            LinalgError::InvalidRidge { .. }
        ));
    }

    #[test]
    fn solve_lower_hand_example_is_exact() {
        let l = Matrix::from_rows(&[[2.0, 0.0], [1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[2.0], [3.0]]).unwrap();
        let y = solve_lower(&l, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn solve_lower_random_residual_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let mut l = random_matrix(&mut rng, 9, 9).data().to_vec();
            for i in 0..9 {
                for j in 0..9 {
                    if j > i {
                        l[i * 9 + j] = 0.0;
                    }
                }
                l[i * 9 + i] = rng.gen_range(0.5..2.0);
            }
            let l = Matrix::from_vec(9, 9, l).unwrap();
            let b = random_matrix(&mut rng, 9, 4);
            let y = solve_lower(&l, &b).unwrap();
            let residual = l.matmul(&y).unwrap().sub(&b).unwrap().fro_norm();
            assert!(residual <= 1e-10 * b.fro_norm().max(1.0));
        }
    }

    #[test]
    fn solve_right_lower_random_residual_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let mut l = random_matrix(&mut rng, 7, 7).data().to_vec();
            for i in 0..7 {
                for j in 0..7 {
                    if j > i {
                        l[i * 7 + j] = 0.0;
                    }
                }
                l[i * 7 + i] = rng.gen_range(0.5..2.0);
            }
            let l = Matrix::from_vec(7, 7, l).unwrap();
            let b = random_matrix(&mut rng, 5, 7);
            let y = solve_right_lower(&b, &l).unwrap();
            let residual = y.matmul(&l).unwrap().sub(&b).unwrap().fro_norm();
            assert!(residual <= 1e-10 * b.fro_norm().max(1.0));
        }
    }

    #[test]
    fn solves_against_identity_are_noops() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let b = random_matrix(&mut rng, 6, 6);
        let bits: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        let fwd = solve_lower(&Matrix::identity(6), &b).unwrap();
        let right = solve_right_lower(&b, &Matrix::identity(6)).unwrap();
        assert_eq!(bits, fwd.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(bits, right.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn solves_reject_singular_diagonal_and_bad_shapes() {
        let l = Matrix::from_rows(&[[1.0, 0.0], [5.0, 0.0]]).unwrap();
        assert!(matches!(
            solve_lower(&l, &Matrix::zeros(2, 1)).unwrap_err(),
            LinalgError::SingularDiagonal { index: 1, .. }
        ));
        assert!(matches!(
            solve_right_lower(&Matrix::zeros(1, 2), &l).unwrap_err(),
            LinalgError::SingularDiagonal { index: 1, .. }
        ));
        assert!(matches!(
            solve_lower(&Matrix::identity(3), &Matrix::zeros(2, 1)).unwrap_err(),
            LinalgError::Tensor(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            solve_right_lower(&Matrix::zeros(1, 2), &Matrix::identity(3)).unwrap_err(),
            LinalgError::Tensor(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn triangular_solves_invert_each_other_through_cholesky() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let g = random_matrix(&mut rng, 8, 30).gram();
        let l = cholesky_lower(&g, 0.0).unwrap();
        // (B * L^-1) * L == B and L * (L^-1 * B) == B.
        let b = random_matrix(&mut rng, 4, 8);
        let y = solve_right_lower(&b, &l).unwrap();
        assert!(y.matmul(&l).unwrap().sub(&b).unwrap().fro_norm() <= 1e-9 * b.fro_norm());
    }

    #[test]
    fn svd_of_diagonal_sorts_descending() {
        let a = Matrix::from_rows(&[[3.0, 0.0], [0.0, 4.0]]).unwrap();
        let r = svd(&a).unwrap();
        assert_eq!(r.sigma, vec![4.0, 3.0]);
        let recon = reconstruct(&r);
        assert!(recon.sub(&a).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn svd_of_identity_is_flat() {
        let r = svd(&Matrix::identity(4)).unwrap();
        assert_eq!(r.sigma, vec![1.0, 1.0, 1.0, 1.0]);
        assert!(reconstruct(&r).sub(&Matrix::identity(4)).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn svd_hand_example_matches_analytic_values() {
        // Rows (1,0), (0,1), (1,1): Gram of columns is [[2,1],[1,2]] with
        // eigenvalues 3 and 1, so the singular values are sqrt(3) and 1.
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let r = svd(&a).unwrap();
        assert!((r.sigma[0] - 3.0f64.sqrt()).abs() <= 1e-12);
        assert!((r.sigma[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn svd_rank_one_collapses_second_value() {
        let a = Matrix::from_rows(&[[3.0, 4.0], [6.0, 8.0]]).unwrap();
        let r = svd(&a).unwrap();
        let expected = (5.0f64).sqrt() * 5.0; // ||(1,2)|| * ||(3,4)||
        assert!((r.sigma[0] - expected).abs() <= 1e-12 * expected);
        assert!(r.sigma[1] <= 1e-12 * r.sigma[0]);
        assert!(reconstruct(&r).sub(&a).unwrap().fro_norm() <= 1e-10 * a.fro_norm());
    }

    #[test]
    fn svd_exact_zero_column_completes_basis() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let r = svd(&a).unwrap();
        assert_eq!(r.sigma, vec![1.0, 0.0]);
        assert_eq!(r.u, Matrix::identity(2));
        assert_eq!(r.vt, Matrix::identity(2));
    }

    #[test]
    fn svd_of_zero_matrix_builds_full_orthonormal_u() {
        let a = Matrix::zeros(3, 2);
        let r = svd(&a).unwrap();
        assert_eq!(r.sigma, vec![0.0, 0.0]);
        assert_orthonormal_columns(&r.u, 0.0);
        assert_eq!(r.u.get(0, 0), 1.0);
        assert_eq!(r.u.get(1, 1), 1.0);
    }

    #[test]
    fn svd_invariants_hold_across_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for &(rows, cols) in &[(8usize, 8usize), (12, 5), (5, 12), (1, 7), (7, 1), (20, 3)] {
            for _ in 0..10 {
                let a = random_matrix(&mut rng, rows, cols);
                let r = svd(&a).unwrap();
                let k = rows.min(cols);
                assert_eq!(r.u.shape(), (rows, k));
                assert_eq!(r.sigma.len(), k);
                assert_eq!(r.vt.shape(), (k, cols));
                for w in r.sigma.windows(2) {
                    assert!(w[0] >= w[1], "sigma not descending: {:?}", r.sigma);
                }
                assert!(r.sigma.iter().all(|s| *s >= 0.0));
                assert_orthonormal_columns(&r.u, 1e-10);
                assert_orthonormal_columns(&r.vt.transpose(), 1e-10);
                let recon_err = reconstruct(&r).sub(&a).unwrap().fro_norm();
                assert!(
                    recon_err <= 1e-9 * a.fro_norm().max(1e-300),
                    "reconstruction error {recon_err:e} for {rows}x{cols}"
                );
            }
        }
    }

    #[test]
    fn svd_matches_symmetric_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 10, 6);
            let r = svd(&a).unwrap();
            let eig = symmetric_eigenvalues(&a.transpose().gram());
            assert_eq!(eig.len(), 6);
            for (s, lambda) in r.sigma.iter().zip(&eig) {
                let expected = lambda.max(0.0).sqrt();
                assert!(
                    (s - expected).abs() <= 1e-8 * r.sigma[0].max(1e-300),
                    "sigma {s} vs eigen oracle {expected}"
                );
            }
        }
    }

    #[test]
    fn svd_transpose_has_identical_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a = random_matrix(&mut rng, 9, 4);
        let r1 = svd(&a).unwrap();
        let r2 = svd(&a.transpose()).unwrap();
        let bits1: Vec<u64> = r1.sigma.iter().map(|s| s.to_bits()).collect();
        let bits2: Vec<u64> = r2.sigma.iter().map(|s| s.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    #[test]
    fn svd_sign_convention_is_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..5 {
            let a = random_matrix(&mut rng, 6, 6);
            let r = svd(&a).unwrap();
            for j in 0..6 {
                let lead = (0..6).map(|i| r.u.get(i, j)).find(|x| *x != 0.0).unwrap();
                assert!(lead > 0.0, "column {j} leads with {lead}");
            }
        }
    }

    #[test]
    fn svd_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let a = random_matrix(&mut rng, 12, 7);
        let r1 = svd(&a).unwrap();
        let r2 = svd(&a).unwrap();
        assert_eq!(r1.u, r2.u);
        assert_eq!(r1.vt, r2.vt);
        let bits1: Vec<u64> = r1.sigma.iter().map(|s| s.to_bits()).collect();
        let bits2: Vec<u64> = r2.sigma.iter().map(|s| s.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    #[test]
    fn effective_rank_flat_spectrum_is_exact() {
        let er = effective_rank(&[1.0, 1.0, 1.0, 1.0], 0.0).unwrap();
        assert_eq!(er.to_bits(), 4.0f64.to_bits());
        // Larger flat spectra land within rounding of n (exp(ln n) is not
        // exact for every n), so only bound them tightly.
        let er8 = effective_rank(&[0.25; 8], 0.0).unwrap();
        assert!((er8 - 8.0).abs() <= 1e-12 * 8.0);
    }

    #[test]
    fn effective_rank_two_to_one_spectrum_frozen_value() {
        let er = effective_rank(&[2.0, 1.0], 0.0).unwrap();
        assert_eq!(er, 1.8898815748423097);
        assert!((er - 1.8899).abs() <= 1e-4);
    }

    #[test]
    fn effective_rank_single_direction_is_one() {
        assert_eq!(effective_rank(&[5.0], 0.0).unwrap(), 1.0);
        let with_eps = effective_rank(&[5.0], EFFECTIVE_RANK_EPSILON).unwrap();
        assert!((with_eps - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn effective_rank_ignores_zero_terms_and_scales() {
        let er_padded = effective_rank(&[2.0, 1.0, 0.0, 0.0], 0.0).unwrap();
        assert_eq!(er_padded, 1.8898815748423097);
        // Scaling by a power of two leaves every quotient bit-identical.
        let a = effective_rank(&[3.0, 1.5, 0.75], 0.0).unwrap();
        let b = effective_rank(&[12.0, 6.0, 3.0], 0.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        // Arbitrary scaling agrees to rounding.
        let c = effective_rank(&[9.0, 4.5, 2.25], 0.0).unwrap();
        assert!((a - c).abs() <= 1e-12 * a);
    }

    #[test]
    fn effective_rank_stays_between_one_and_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n = rng.gen_range(1..20);
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..10.0)).collect();
            let er = effective_rank(&sigma, 0.0).unwrap();
            assert!(er >= 1.0 - 1e-12 && er <= n as f64 + 1e-12, "er {er} for n {n}");
        }
    }

    #[test]
    fn effective_rank_rejects_bad_spectra() {
        assert!(matches!(effective_rank(&[], 0.0).unwrap_err(), LinalgError::EmptySpectrum));
        assert!(matches!(
            effective_rank(&[1.0, -0.5], 0.0).unwrap_err(),
            LinalgError::NegativeSigma { index: 1, .. }
        ));
        assert!(matches!(
            effective_rank(&[0.0, 0.0], 0.0).unwrap_err(),
            LinalgError::AllZeroSigma
        ));
        assert!(matches!(
            effective_rank(&[1.0], -1e-9).unwrap_err(),
            LinalgError::InvalidEpsilon { .. }
        ));
    }
}
