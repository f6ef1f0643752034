//! Positive-definite matrix bookkeeping for the information matrix
//! `V_t = V + Σ_s M(x_s, a_s)` and the weighted parameter norms built on it.
//!
//! [`InfoMatrix`] keeps a lower Cholesky factor alongside the dense matrix so
//! that the log-determinant (the quantity the lazy resampling rule compares)
//! is available in O(1) and stays exact by construction: it is always
//! `2·Σ ln L_ii`. Increments are applied as rank-one Cholesky updates with a
//! full refactorization every [`REFACTOR_INTERVAL`] updates to cap drift.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Rank-one updates between full Cholesky refactorizations.
pub const REFACTOR_INTERVAL: usize = 1000;

/// Power-iteration relative tolerance for spectral norms.
const POWER_TOL: f64 = 1e-10;
/// Power-iteration iteration cap.
const POWER_MAX_ITER: usize = 10_000;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rank-one update weight must be nonnegative, got {0}")]
    NegativeWeight(f64),
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("matrix contains non-finite entries")]
    NotFinite,
}

/// The information matrix `V_t` with cached Cholesky factor, log-determinant
/// and trace.
///
/// Construction rejects singular or indefinite matrices; every update by a
/// positive semidefinite increment keeps the matrix positive definite, so
/// `log_det` and `trace` are non-decreasing along any run.
#[derive(Debug, Clone)]
pub struct InfoMatrix {
    dense: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
    trace: f64,
    updates_since_refactor: usize,
}

impl InfoMatrix {
    /// Wraps a symmetric positive definite matrix.
    pub fn new(v: DMatrix<f64>) -> Result<Self, LinalgError> {
        let m = v.nrows();
        if v.ncols() != m {
            return Err(LinalgError::DimensionMismatch {
                expected: m,
                got: v.ncols(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NotFinite);
        }
        let scale = 1.0 + v.amax();
        for i in 0..m {
            for j in (i + 1)..m {
                if (v[(i, j)] - v[(j, i)]).abs() > 1e-9 * scale {
                    return Err(LinalgError::NotSymmetric);
                }
            }
        }
        let sym = (&v + v.transpose()) * 0.5;
        let chol = cholesky_lower(&sym).ok_or(LinalgError::NotPositiveDefinite)?;
        let log_det = 2.0 * chol.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let trace = sym.trace();
        Ok(Self {
            dense: sym,
            chol,
            log_det,
            trace,
            updates_since_refactor: 0,
        })
    }

    /// Diagonal matrix with strictly positive entries.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self, LinalgError> {
        Self::new(DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim)).expect("identity is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.dense.nrows()
    }

    /// `ln det(V_t)`, equal to `2·Σ ln L_ii` of the maintained factor.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn dense(&self) -> &DMatrix<f64> {
        &self.dense
    }

    /// Lower-triangular factor `L` with `L·Lᵀ = V_t`.
    pub fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Applies `V + Σ wᵢ vᵢvᵢᵀ` and returns the updated matrix.
    ///
    /// Weights must be nonnegative and every vector must match the
    /// dimension. Zero-weight or zero-vector increments are no-ops.
    pub fn updated(&self, increments: &[(f64, DVector<f64>)]) -> Result<Self, LinalgError> {
        let mut out = self.clone();
        out.update_in_place(increments)?;
        Ok(out)
    }

    fn update_in_place(&mut self, increments: &[(f64, DVector<f64>)]) -> Result<(), LinalgError> {
        let m = self.dim();
        for (w, v) in increments {
            if !w.is_finite() || v.iter().any(|x| !x.is_finite()) {
                return Err(LinalgError::NotFinite);
            }
            if *w < 0.0 {
                return Err(LinalgError::NegativeWeight(*w));
            }
            if v.len() != m {
                return Err(LinalgError::DimensionMismatch {
                    expected: m,
                    got: v.len(),
                });
            }
        }
        for (w, v) in increments {
            let norm_sq = v.norm_squared();
            if *w == 0.0 || norm_sq == 0.0 {
                continue;
            }
            let u = v * w.sqrt();
            for i in 0..m {
                for j in 0..=i {
                    let inc = w * v[i] * v[j];
                    self.dense[(i, j)] += inc;
                    if i != j {
                        self.dense[(j, i)] = self.dense[(i, j)];
                    }
                }
            }
            rank_one_chol_update(&mut self.chol, u);
            self.trace += w * norm_sq;
            self.updates_since_refactor += 1;
            if self.updates_since_refactor >= REFACTOR_INTERVAL {
                self.refactor()?;
            }
        }
        self.log_det = 2.0 * self.chol.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(())
    }

    fn refactor(&mut self) -> Result<(), LinalgError> {
        self.chol = cholesky_lower(&self.dense).ok_or(LinalgError::NotPositiveDefinite)?;
        self.trace = self.dense.trace();
        self.updates_since_refactor = 0;
        Ok(())
    }

    /// Solves `V x = rhs` through the Cholesky factor.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let y = self
            .chol
            .solve_lower_triangular(rhs)
            .expect("factor has positive diagonal");
        self.chol
            .transpose()
            .solve_upper_triangular(&y)
            .expect("factor has positive diagonal")
    }

    /// Maps a standard normal vector `z` to `L^{-ᵀ} z`, which has
    /// covariance `V^{-1}`.
    pub fn whiten_inverse(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol
            .transpose()
            .solve_upper_triangular(z)
            .expect("factor has positive diagonal")
    }

    /// Relative Frobenius error of `L·Lᵀ` against the dense matrix.
    pub fn reconstruction_error(&self) -> f64 {
        let rebuilt = &self.chol * self.chol.transpose();
        (&rebuilt - &self.dense).norm() / self.dense.norm().max(f64::MIN_POSITIVE)
    }
}

/// Lower Cholesky factor of a symmetric matrix, `None` if not positive
/// definite.
fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.clone()).map(|c| c.unpack())
}

/// In-place rank-one update `L·Lᵀ + u·uᵀ` of a lower Cholesky factor.
fn rank_one_chol_update(l: &mut DMatrix<f64>, mut u: DVector<f64>) {
    let n = l.nrows();
    let mut b = 1.0;
    for j in 0..n {
        let ljj = l[(j, j)];
        let ljj2 = ljj * ljj;
        let uj = u[j];
        let uj2 = uj * uj;
        let new_ljj = (ljj2 + uj2 / b).sqrt();
        let gamma = ljj2 * b + uj2;
        for k in (j + 1)..n {
            let lkj = l[(k, j)];
            let uk = u[k] - uj * lkj / ljj;
            l[(k, j)] = new_ljj * (lkj / ljj + uj * uk / gamma);
            u[k] = uk;
        }
        b += uj2 / ljj2;
        l[(j, j)] = new_ljj;
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Deterministic all-ones start, relative tolerance `1e-10`, at most
/// `10_000` iterations.
pub fn spectral_norm_sym(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut x = DVector::repeat(n, 1.0 / (n as f64).sqrt());
    let mut rayleigh = 0.0f64;
    for _ in 0..POWER_MAX_ITER {
        let y = s * &x;
        let ny = y.norm();
        if ny <= f64::MIN_POSITIVE {
            return 0.0;
        }
        let r = x.dot(&y);
        let next = &y / ny;
        if (r - rayleigh).abs() <= POWER_TOL * r.abs().max(f64::MIN_POSITIVE) {
            return r.max(0.0);
        }
        rayleigh = r;
        x = next;
    }
    rayleigh.max(0.0)
}

/// Weighted parameter norm `‖Θ‖_M = sqrt(‖Θᵀ M Θ‖₂)` with `‖·‖₂` the
/// spectral norm.
pub fn weighted_param_norm(theta: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if theta.nrows() != m.nrows() {
        return Err(LinalgError::DimensionMismatch {
            expected: m.nrows(),
            got: theta.nrows(),
        });
    }
    let scale = 1.0 + m.amax();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                return Err(LinalgError::NotSymmetric);
            }
        }
    }
    let inner = theta.transpose() * m * theta;
    let sym = (&inner + inner.transpose()) * 0.5;
    Ok(spectral_norm_sym(&sym).sqrt())
}

/// `‖Δᵀ V^{1/2}‖₂` computed as `sqrt(‖Δᵀ V Δ‖₂)`, avoiding an explicit
/// matrix square root.
pub fn half_weighted_norm(delta: &DMatrix<f64>, v: &InfoMatrix) -> Result<f64, LinalgError> {
    if delta.nrows() != v.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: v.dim(),
            got: delta.nrows(),
        });
    }
    weighted_param_norm(delta, v.dense())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn unit(dim: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        v
    }

    fn log_det_eigen_oracle(m: &DMatrix<f64>) -> f64 {
        SymmetricEigen::new(m.clone())
            .eigenvalues
            .iter()
            .map(|x| x.ln())
            .sum()
    }

    #[test]
    fn diagonal_update_doubles_det() {
        let v = InfoMatrix::identity(2);
        let up = v.updated(&[(1.0, unit(2, 0))]).unwrap();
        assert_relative_eq!(up.log_det(), 2.0f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(up.trace(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_increment_is_noop() {
        let v = InfoMatrix::identity(2);
        let up = v.updated(&[(0.0, unit(2, 0))]).unwrap();
        assert_eq!(up.log_det(), 0.0);
        assert_eq!(up.trace(), 2.0);
        let up = v.updated(&[]).unwrap();
        assert_eq!(up.log_det(), 0.0);
    }

    #[test]
    fn random_updates_match_eigen_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut v = InfoMatrix::identity(3);
        for _ in 0..50 {
            let vec = DVector::from_fn(3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let w = rng.random::<f64>();
            v = v.updated(&[(w, vec)]).unwrap();
        }
        let oracle = log_det_eigen_oracle(v.dense());
        assert_relative_eq!(v.log_det(), oracle, epsilon = 1e-8);
        assert!(v.reconstruction_error() < 1e-8);
    }

    #[test]
    fn refactorization_keeps_factor_accurate() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut v = InfoMatrix::identity(2);
        for _ in 0..(3 * REFACTOR_INTERVAL / 2) {
            let vec = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
            v = v.updated(&[(0.01, vec)]).unwrap();
        }
        assert!(v.reconstruction_error() < 1e-8);
        assert_relative_eq!(v.log_det(), log_det_eigen_oracle(v.dense()), epsilon = 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let v = InfoMatrix::identity(2);
        assert!(matches!(
            v.updated(&[(-1.0, unit(2, 0))]),
            Err(LinalgError::NegativeWeight(_))
        ));
        assert!(matches!(
            v.updated(&[(1.0, unit(3, 0))]),
            Err(LinalgError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            InfoMatrix::from_diagonal(&[1.0, 0.0]),
            Err(LinalgError::NotPositiveDefinite)
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(matches!(
            InfoMatrix::new(asym),
            Err(LinalgError::NotSymmetric)
        ));
    }

    #[test]
    fn weighted_norm_of_identity_is_m_norm() {
        let theta = DMatrix::identity(2, 2);
        let m = DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 1.0]));
        assert_relative_eq!(weighted_param_norm(&theta, &m).unwrap(), 2.0, epsilon = 1e-10);
    }

    #[test]
    fn weighted_norm_of_zero_is_zero() {
        let theta = DMatrix::zeros(3, 2);
        let m = DMatrix::identity(3, 3);
        assert_eq!(weighted_param_norm(&theta, &m).unwrap(), 0.0);
    }

    #[test]
    fn weighted_norm_matches_eigensolver() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let theta = DMatrix::from_fn(3, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let g = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
            let m = &g * g.transpose() + DMatrix::identity(3, 3) * 0.1;
            let got = weighted_param_norm(&theta, &m).unwrap();
            let inner = theta.transpose() * &m * &theta;
            let oracle = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
                .eigenvalues
                .amax()
                .sqrt();
            assert_relative_eq!(got, oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn half_weighted_norm_diagonal_case() {
        let v = InfoMatrix::from_diagonal(&[9.0, 1.0, 1.0]).unwrap();
        let delta = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        assert_relative_eq!(half_weighted_norm(&delta, &v).unwrap(), 3.0, epsilon = 1e-10);
        let zero = DMatrix::zeros(3, 2);
        assert_eq!(half_weighted_norm(&zero, &v).unwrap(), 0.0);
    }

    #[test]
    fn half_weighted_norm_matches_explicit_sqrt_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
            let dense = &g * g.transpose() + DMatrix::identity(3, 3) * 0.2;
            let v = InfoMatrix::new(dense.clone()).unwrap();
            let delta = DMatrix::from_fn(3, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let got = half_weighted_norm(&delta, &v).unwrap();

            let eig = SymmetricEigen::new(dense);
            let mut sqrt_v = DMatrix::zeros(3, 3);
            for (i, lam) in eig.eigenvalues.iter().enumerate() {
                let u = eig.eigenvectors.column(i);
                sqrt_v += u * u.transpose() * lam.sqrt();
            }
            let w = delta.transpose() * sqrt_v;
            let gram = &w * w.transpose();
            let oracle = SymmetricEigen::new((&gram + gram.transpose()) * 0.5)
                .eigenvalues
                .amax()
                .sqrt();
            assert_relative_eq!(got, oracle, epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn update_order_does_not_matter(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let m = 2 + (seed as usize % 3);
            let incs: Vec<(f64, DVector<f64>)> = (0..6)
                .map(|_| {
                    let w = rng.random::<f64>();
                    let v = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
                    (w, v)
                })
                .collect();
            let fwd = InfoMatrix::identity(m).updated(&incs).unwrap();
            let rev: Vec<_> = incs.iter().rev().cloned().collect();
            let bwd = InfoMatrix::identity(m).updated(&rev).unwrap();
            let diff = (fwd.dense() - bwd.dense()).norm();
            prop_assert!(diff < 1e-8, "permutation changed V by {diff}");
        }

        #[test]
        fn psd_updates_are_monotone(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut v = InfoMatrix::identity(3);
            for _ in 0..10 {
                let w = rng.random::<f64>();
                let vec = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
                let next = v.updated(&[(w, vec)]).unwrap();
                prop_assert!(next.log_det() >= v.log_det() - 1e-12);
                prop_assert!(next.trace() >= v.trace() - 1e-12);
                v = next;
            }
        }
    }
}
