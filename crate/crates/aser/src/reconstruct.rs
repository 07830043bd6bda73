//! Activation-aware low-rank reconstruction of quantization error.
//!
//! Plain truncated SVD of the rounding error `E` minimizes weight-space
//! error, but layers are judged by their outputs: what matters is
//! `||E * X||` over the activations `X` the layer actually sees. Factoring
//! `X`'s Gram matrix as `S * S^T` (Cholesky) turns that objective into a
//! plain Frobenius problem for the whitened error `E * S`, whose truncated
//! SVD is optimal by Eckart-Young. Splitting the solution as
//! `la = U_r * diag(sigma_r)` and `lb = V_r^T * S^-1` yields two skinny
//! adapters whose product cancels the dominant, activation-weighted part of
//! the rounding error.
//!
//! Two exact identities make this testable and are exercised throughout the
//! test suite (ridge 0):
//!
//! - dropping only the i-th singular direction changes the layer output by
//!   exactly `sigma_i` in Frobenius norm;
//! - compensating with rank `r` leaves exactly
//!   `sqrt(sum_{i>r} sigma_i^2)` of output error.

use crate::linalg::{
    cholesky_lower, pairwise_sum, solve_lower, solve_right_lower, svd, LinalgError, SvdResult,
};
use crate::tensor::{Matrix, TensorError};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug)]
pub enum ReconstructError {
    /// Spectral-mass threshold outside the open interval (0, 1).
    InvalidAlpha { value: f64 },
    NegativeSigma { index: usize, value: f64 },
    DimensionMismatch { op: &'static str, expected: usize, actual: usize },
    Linalg(LinalgError),
    Tensor(TensorError),
}

impl fmt::Display for ReconstructError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReconstructError::InvalidAlpha { value } => {
                write!(f, "threshold alpha must lie strictly between 0 and 1, got {value}")
            }
            ReconstructError::NegativeSigma { index, value } => {
                write!(f, "singular value {index} is negative ({value:e})")
            }
            ReconstructError::DimensionMismatch { op, expected, actual } => {
                write!(f, "{op}: dimension mismatch, expected {expected}, got {actual}")
            }
            ReconstructError::Linalg(e) => write!(f, "{e}"),
            ReconstructError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

// Display already embeds the full wrapped message; see TensorError.
impl std::error::Error for ReconstructError {}

impl From<LinalgError> for ReconstructError {
    fn from(e: LinalgError) -> Self {
        ReconstructError::Linalg(e)
    }
}

impl From<TensorError> for ReconstructError {
    fn from(e: TensorError) -> Self {
        ReconstructError::Tensor(e)
    }
}

/// Cholesky factor of an activation Gram matrix, used to whiten error
/// matrices. The factor's inverse is never materialized; whitening and
/// un-whitening go through triangular solves.
#[derive(Debug, Clone)]
pub struct Whitener {
    s: Matrix,
    ridge: f64,
}

impl Whitener {
    /// Lower-triangular factor `S` with `S * S^T = gram + ridge * I`.
    pub fn factor(&self) -> &Matrix {
        &self.s
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Channel dimension the whitener applies to.
    pub fn dim(&self) -> usize {
        self.s.rows()
    }

    /// `S^-1 * x`: activations in the whitened coordinate system. With
    /// ridge 0 the rows of the result are exactly decorrelated:
    /// `(S^-1 X)(S^-1 X)^T = I`.
    pub fn whiten_activations(&self, x: &Matrix) -> Result<Matrix, ReconstructError> {
        if x.rows() != self.dim() {
            return Err(ReconstructError::DimensionMismatch {
                op: "whiten_activations",
                expected: self.dim(),
                actual: x.rows(),
            });
        }
        Ok(solve_lower(&self.s, x)?)
    }
}

/// Builds a whitener from calibration activations (`channels x tokens`).
pub fn compute_whitener(x: &Matrix, ridge: f64) -> Result<Whitener, ReconstructError> {
    compute_whitener_from_gram(&x.gram(), ridge)
}

/// Builds a whitener from a precomputed Gram matrix (`channels x channels`).
pub fn compute_whitener_from_gram(gram: &Matrix, ridge: f64) -> Result<Whitener, ReconstructError> {
    let s = cholesky_lower(gram, ridge)?;
    Ok(Whitener { s, ridge })
}

/// SVD of the whitened error `e * S`. The singular values are in output
/// units: with ridge 0, sigma_i is exactly the Frobenius output error
/// contributed by direction i.
pub fn whitening_svd(e: &Matrix, whitener: &Whitener) -> Result<SvdResult, ReconstructError> {
    if e.cols() != whitener.dim() {
        return Err(ReconstructError::DimensionMismatch {
            op: "whitening_svd",
            expected: whitener.dim(),
            actual: e.cols(),
        });
    }
    Ok(svd(&e.matmul(whitener.factor())?)?)
}

/// How many singular directions the adapters keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankPolicy {
    /// Exactly this rank (capped at the spectrum length). Zero disables
    /// compensation.
    Fixed(usize),
    /// Smallest prefix whose share of total singular mass stays below
    /// `alpha`, clamped to `[1, r_max]`. `r_max` defaults to a quarter of
    /// the spectrum length (at least 1).
    Threshold { alpha: f64, r_max: Option<usize> },
}

/// Resolves a policy against a singular value spectrum.
pub fn select_rank(sigma: &[f64], policy: &RankPolicy) -> Result<usize, ReconstructError> {
    if let Some(index) = sigma.iter().position(|s| *s < 0.0) {
        return Err(ReconstructError::NegativeSigma { index, value: sigma[index] });
    }
    match policy {
        RankPolicy::Fixed(r) => Ok((*r).min(sigma.len())),
        RankPolicy::Threshold { alpha, r_max } => {
            if !(*alpha > 0.0 && *alpha < 1.0) {
                return Err(ReconstructError::InvalidAlpha { value: *alpha });
            }
            let total = pairwise_sum(sigma);
            if total == 0.0 {
                // Nothing to compensate; an all-zero spectrum short-circuits
                // before the minimum-rank clamp.
                return Ok(0);
            }
            let mut rank = 0usize;
            let mut cum = 0.0;
            for (k, &s) in sigma.iter().enumerate() {
                cum += s;
                if cum / total < *alpha {
                    rank = k + 1;
                } else {
                    break;
                }
            }
            let cap = r_max.unwrap_or_else(|| (sigma.len() / 4).max(1)).max(1);
            Ok(rank.max(1).min(cap).min(sigma.len()))
        }
    }
}

/// The low-rank compensation pair. At inference the layer computes
/// `dequantized_weight * x + la * (lb * x)`; `la` is `out x r` and `lb` is
/// `r x in`, so both products are skinny.
#[derive(Debug, Clone)]
pub struct Adapters {
    la: Matrix,
    lb: Matrix,
    sigma_tail: Vec<f64>,
}

impl Adapters {
    pub fn la(&self) -> &Matrix {
        &self.la
    }

    pub fn lb(&self) -> &Matrix {
        &self.lb
    }

    pub fn rank(&self) -> usize {
        self.la.cols()
    }

    /// Singular values beyond the kept rank, in descending order.
    pub fn sigma_tail(&self) -> &[f64] {
        &self.sigma_tail
    }

    /// Predicted output-space error left after compensation:
    /// `sqrt(sum of squared tail singular values)`. Exact for whitened
    /// adapters with ridge 0.
    pub fn predicted_tail_loss(&self) -> f64 {
        let squares: Vec<f64> = self.sigma_tail.iter().map(|s| s * s).collect();
        pairwise_sum(&squares).sqrt()
    }

    /// `la * (lb * x)`, the compensation term for a batch of activations.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix, ReconstructError> {
        Ok(self.la.matmul(&self.lb.matmul(x)?)?)
    }

    /// Rebuilds adapters from stored matrices (plus the stored tail
    /// spectrum, which may be empty when unknown).
    pub fn from_parts(la: Matrix, lb: Matrix, sigma_tail: Vec<f64>) -> Result<Adapters, ReconstructError> {
        if la.cols() != lb.rows() {
            return Err(ReconstructError::DimensionMismatch {
                op: "Adapters::from_parts",
                expected: la.cols(),
                actual: lb.rows(),
            });
        }
        if let Some(index) = sigma_tail.iter().position(|s| *s < 0.0) {
            return Err(ReconstructError::NegativeSigma { index, value: sigma_tail[index] });
        }
        Ok(Adapters { la, lb, sigma_tail })
    }
}

/// Builds whitened adapters for an error matrix `e` (`out x in`).
///
/// `la = U_r * diag(sigma_r)` and `lb = V_r^T * S^-1`, from the SVD of
/// `e * S`. The product `la * lb` is the rank-`r` matrix minimizing
/// `||(e - la * lb) * X||_F` (exactly, when ridge is 0).
pub fn build_adapters(
    e: &Matrix,
    whitener: &Whitener,
    policy: &RankPolicy,
) -> Result<Adapters, ReconstructError> {
    let decomposition = whitening_svd(e, whitener)?;
    let rank = select_rank(&decomposition.sigma, policy)?;
    let (la, vrt) = split_factors(&decomposition, rank);
    let lb = solve_right_lower(&vrt, whitener.factor())?;
    Ok(Adapters { la, lb, sigma_tail: decomposition.sigma[rank..].to_vec() })
}

/// Builds plain (unwhitened) adapters from the SVD of `e` itself. This is
/// the classic low-rank error compensation baseline: optimal for
/// `||e - la * lb||_F`, blind to which directions the activations excite.
/// Its tail spectrum therefore predicts weight-space error, not output
/// error.
pub fn build_adapters_unwhitened(
    e: &Matrix,
    policy: &RankPolicy,
) -> Result<Adapters, ReconstructError> {
    let decomposition = svd(e)?;
    let rank = select_rank(&decomposition.sigma, policy)?;
    let (la, lb) = split_factors(&decomposition, rank);
    Ok(Adapters { la, lb, sigma_tail: decomposition.sigma[rank..].to_vec() })
}

/// `(U_r * diag(sigma_r), V_r^T)` for the leading `rank` directions.
fn split_factors(d: &SvdResult, rank: usize) -> (Matrix, Matrix) {
    let out_dim = d.u.rows();
    let in_dim = d.vt.cols();
    let mut la = Vec::with_capacity(out_dim * rank);
    for i in 0..out_dim {
        for j in 0..rank {
            la.push(d.u.get(i, j) * d.sigma[j]);
        }
    }
    let mut vrt = Vec::with_capacity(rank * in_dim);
    for i in 0..rank {
        vrt.extend_from_slice(d.vt.row(i));
    }
    (
        Matrix::from_vec(out_dim, rank, la).expect("finite products"),
        Matrix::from_vec(rank, in_dim, vrt).expect("copied rows"),
    )
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

    #[test]
    fn whitener_of_identity_activations_is_identity() {
        let x = Matrix::identity(5);
        let w = compute_whitener(&x, 0.0).unwrap();
        assert_eq!(w.factor(), &Matrix::identity(5));
        let wx = w.whiten_activations(&x).unwrap();
        assert_eq!(wx, Matrix::identity(5));
    }

    #[test]
    fn whitened_activations_have_identity_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..10 {
            let x = random_matrix(&mut rng, 8, 50);
            let w = compute_whitener(&x, 0.0).unwrap();
            let wx = w.whiten_activations(&x).unwrap();
            let dev = wx.gram().sub(&Matrix::identity(8)).unwrap().max_abs();
            assert!(dev <= 1e-10, "whitening deviation {dev:e}");
        }
    }

    #[test]
    fn whitener_needs_ridge_on_deficient_activations() {
        // Two identical channels: the Gram matrix is exactly singular.
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            compute_whitener(&x, 0.0).unwrap_err(),
            ReconstructError::Linalg(LinalgError::NotPositiveDefinite { .. })
        ));
        let gram = x.gram();
        let ridge = 1e-8 * gram.trace() / gram.rows() as f64;
        let w = compute_whitener(&x, ridge).unwrap();
        assert_eq!(w.ridge(), ridge);
        // The factor reconstructs gram + ridge * I. (The whitened Gram is
        // NOT near the identity here: the duplicated channel leaves a null
        // direction whose whitened energy is 0/(0 + ridge) = 0.)
        let recon = w.factor().matmul(&w.factor().transpose()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expected = gram.get(i, j) + if i == j { ridge } else { 0.0 };
                assert!((recon.get(i, j) - expected).abs() <= 1e-12 * gram.trace());
            }
        }
        let wx = w.whiten_activations(&x).unwrap();
        // Whitened energy per direction is at most 1.
        let wg = wx.gram();
        assert!(wg.get(0, 0) <= 1.0 + 1e-10 && wg.get(1, 1) <= 1.0 + 1e-10);
    }

    #[test]
    fn whitener_from_gram_matches_from_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x = random_matrix(&mut rng, 6, 30);
        let a = compute_whitener(&x, 1e-10).unwrap();
        let b = compute_whitener_from_gram(&x.gram(), 1e-10).unwrap();
        let bits =
            |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.factor()), bits(b.factor()));
    }

    #[test]
    fn select_rank_fixed_caps_at_spectrum_length() {
        let sigma = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(select_rank(&sigma, &RankPolicy::Fixed(2)).unwrap(), 2);
        assert_eq!(select_rank(&sigma, &RankPolicy::Fixed(10)).unwrap(), 4);
        assert_eq!(select_rank(&sigma, &RankPolicy::Fixed(0)).unwrap(), 0);
    }

    #[test]
    fn select_rank_threshold_hand_examples() {
        let sigma = [4.0, 3.0, 2.0, 1.0];
        // Mass fractions by prefix: 0.4, 0.7, 0.9, 1.0.
        let policy = |alpha| RankPolicy::Threshold { alpha, r_max: Some(4) };
        assert_eq!(select_rank(&sigma, &policy(0.5)).unwrap(), 1);
        assert_eq!(select_rank(&sigma, &policy(0.05)).unwrap(), 1); // clamped up
        assert_eq!(select_rank(&sigma, &policy(0.75)).unwrap(), 2);
        assert_eq!(select_rank(&sigma, &policy(0.95)).unwrap(), 3);
        // Default cap is a quarter of the spectrum length.
        let defaulted = RankPolicy::Threshold { alpha: 0.95, r_max: None };
        assert_eq!(select_rank(&sigma, &defaulted).unwrap(), 1);
    }

    #[test]
    fn select_rank_zero_spectrum_skips_the_minimum_clamp() {
        let policy = RankPolicy::Threshold { alpha: 0.5, r_max: Some(8) };
        assert_eq!(select_rank(&[0.0, 0.0, 0.0], &policy).unwrap(), 0);
        assert_eq!(select_rank(&[], &policy).unwrap(), 0);
    }

    #[test]
    fn select_rank_rejects_bad_inputs() {
        for alpha in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(
                select_rank(&[1.0], &RankPolicy::Threshold { alpha, r_max: None }).unwrap_err(),
                ReconstructError::InvalidAlpha { .. }
            ));
        }
        assert!(matches!(
            select_rank(&[1.0, -2.0], &RankPolicy::Fixed(1)).unwrap_err(),
            ReconstructError::NegativeSigma { index: 1, .. }
        ));
    }

    #[test]
    fn select_rank_is_monotone_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for _ in 0..20 {
            let mut sigma: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..5.0)).collect();
            sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut last = 0usize;
            for alpha in [0.015, 0.03, 0.05, 0.075, 0.1, 0.3, 0.6, 0.9] {
                let r = select_rank(
                    &sigma,
                    &RankPolicy::Threshold { alpha, r_max: Some(16) },
                )
                .unwrap();
                assert!(r >= last, "rank dropped from {last} to {r} at alpha {alpha}");
                last = r;
            }
        }
    }

    #[test]
    fn full_rank_adapters_cancel_the_error_completely() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let e = random_matrix(&mut rng, 6, 8);
        let x = random_matrix(&mut rng, 8, 40);
        let w = compute_whitener(&x, 0.0).unwrap();
        let adapters = build_adapters(&e, &w, &RankPolicy::Fixed(8)).unwrap();
        assert_eq!(adapters.rank(), 6.min(8));
        let residual = e.matmul(&x).unwrap().sub(&adapters.apply(&x).unwrap()).unwrap();
        let reference = e.matmul(&x).unwrap().fro_norm();
        assert!(residual.fro_norm() <= 1e-9 * reference);
        assert_eq!(adapters.predicted_tail_loss(), 0.0);
    }

    #[test]
    fn diagonal_example_has_exact_tail() {
        // With identity activations the whitener is the identity, so the
        // singular values are 4 and 3 and the rank-1 remainder is exactly 3;
        // with rank 0 the predicted loss is the full 5.
        let e = Matrix::from_rows(&[[3.0, 0.0], [0.0, 4.0]]).unwrap();
        let x = Matrix::identity(2);
        let w = compute_whitener(&x, 0.0).unwrap();
        let rank1 = build_adapters(&e, &w, &RankPolicy::Fixed(1)).unwrap();
        assert_eq!(rank1.sigma_tail(), &[3.0]);
        assert_eq!(rank1.predicted_tail_loss(), 3.0);
        let residual = e.matmul(&x).unwrap().sub(&rank1.apply(&x).unwrap()).unwrap();
        assert!((residual.fro_norm() - 3.0).abs() <= 1e-12);

        let rank0 = build_adapters(&e, &w, &RankPolicy::Fixed(0)).unwrap();
        assert_eq!(rank0.rank(), 0);
        assert_eq!(rank0.predicted_tail_loss(), 5.0);
        let zeros = rank0.apply(&x).unwrap();
        assert_eq!(zeros.shape(), (2, 2));
        assert!(zeros.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dropping_one_direction_costs_exactly_its_singular_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for _ in 0..5 {
            let n = 4;
            let e = random_matrix(&mut rng, n, n);
            let x = random_matrix(&mut rng, n, 12);
            let w = compute_whitener(&x, 0.0).unwrap();
            let d = whitening_svd(&e, &w).unwrap();
            let z = solve_right_lower(&d.vt, w.factor()).unwrap();
            for i in 0..n {
                // Reassemble with every direction except i.
                let mut damped = d.sigma.clone();
                damped[i] = 0.0;
                let u_scaled = d
                    .u
                    .scale_cols(&crate::tensor::Vector::from_vec(damped).unwrap())
                    .unwrap();
                let approx = u_scaled.matmul(&z).unwrap();
                let out_err =
                    e.sub(&approx).unwrap().matmul(&x).unwrap().fro_norm();
                let sigma_i = d.sigma[i];
                assert!(
                    (out_err - sigma_i).abs() <= 1e-8 * sigma_i.max(1e-12),
                    "direction {i}: output err {out_err} vs sigma {sigma_i}"
                );
            }
        }
    }

    #[test]
    fn unwhitened_adapters_satisfy_weight_space_eckart_young() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let e = random_matrix(&mut rng, 7, 9);
        for rank in [0usize, 1, 3, 7] {
            let adapters = build_adapters_unwhitened(&e, &RankPolicy::Fixed(rank)).unwrap();
            let approx = adapters.la().matmul(adapters.lb()).unwrap();
            let direct = e.sub(&approx).unwrap().fro_norm();
            let predicted = adapters.predicted_tail_loss();
            // Scale the tolerance by the whole error norm: at full rank the
            // predicted tail is exactly zero while the computed residual is
            // rounding noise.
            assert!(
                (direct - predicted).abs() <= 1e-10 * e.fro_norm(),
                "rank {rank}: direct {direct} vs tail {predicted}"
            );
        }
    }

    #[test]
    fn whitened_beats_unwhitened_on_anisotropic_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let mut wins = 0;
        for _ in 0..20 {
            let n = 12;
            let e = random_matrix(&mut rng, n, n);
            // Activations with strongly uneven channel energy.
            let base = random_matrix(&mut rng, n, 60);
            let gains =
                Vector::from_vec((0..n).map(|i| (i + 1) as f64).collect()).unwrap();
            let x = base.scale_rows(&gains).unwrap();
            let w = compute_whitener(&x, 0.0).unwrap();
            let policy = RankPolicy::Fixed(3);
            let whitened = build_adapters(&e, &w, &policy).unwrap();
            let plain = build_adapters_unwhitened(&e, &policy).unwrap();
            let err = |a: &Adapters| {
                e.matmul(&x).unwrap().sub(&a.apply(&x).unwrap()).unwrap().fro_norm()
            };
            if err(&whitened) < err(&plain) {
                wins += 1;
            }
        }
        assert!(wins >= 17, "whitened won only {wins}/20");
    }

    #[test]
    fn apply_matches_explicit_product_and_handles_rank_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let e = random_matrix(&mut rng, 5, 6);
        let x = random_matrix(&mut rng, 6, 9);
        let w = compute_whitener(&x, 1e-9).unwrap();
        let adapters = build_adapters(&e, &w, &RankPolicy::Fixed(2)).unwrap();
        let fused = adapters.la().matmul(adapters.lb()).unwrap().matmul(&x).unwrap();
        let staged = adapters.apply(&x).unwrap();
        assert!(fused.sub(&staged).unwrap().max_abs() <= 1e-12 * fused.max_abs().max(1.0));
    }

    #[test]
    fn from_parts_checks_inner_dimension_and_tail() {
        let la = Matrix::zeros(4, 2);
        let lb = Matrix::zeros(3, 5);
        assert!(matches!(
            Adapters::from_parts(la.clone(), lb, vec![]).unwrap_err(),
            ReconstructError::DimensionMismatch { expected: 2, actual: 3, .. }
        ));
        let ok = Adapters::from_parts(la, Matrix::zeros(2, 5), vec![1.0, 0.5]).unwrap();
        assert_eq!(ok.rank(), 2);
        assert!((ok.predicted_tail_loss() - 1.25f64.sqrt()).abs() <= 1e-15);
        assert!(matches!(
            Adapters::from_parts(Matrix::zeros(1, 1), Matrix::zeros(1, 1), vec![-1.0])
                .unwrap_err(),
            ReconstructError::NegativeSigma { index: 0, .. }
        ));
    }

    #[test]
    fn whitening_svd_rejects_mismatched_error_width() {
        let w = compute_whitener(&Matrix::identity(4), 0.0).unwrap();
        assert!(matches!(
            whitening_svd(&Matrix::zeros(3, 5), &w).unwrap_err(),
            ReconstructError::DimensionMismatch { expected: 4, actual: 5, .. }
        ));
        assert!(matches!(
            w.whiten_activations(&Matrix::zeros(3, 2)).unwrap_err(),
            ReconstructError::DimensionMismatch { expected: 4, actual: 3, .. }
        ));
    }
}
