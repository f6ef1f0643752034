//! Conjugate posteriors over the system parameter Θ.
//!
//! Two families are supported: a product of Dirichlet distributions over the
//! transition rows of a finite MDP, and a column-wise Gaussian over a linear
//! regression parameter with precision matrix `V_t`. Both expose sampling
//! from an explicit seeded stream, a posterior mean, and the concentration
//! statistic `‖(Θ − Θ̂_t)ᵀ V_t^{1/2}‖²` used as a runtime diagnostic.

use crate::linalg::{half_weighted_norm, InfoMatrix, LinalgError};
use crate::ParamMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("dirichlet parameter must be strictly positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("support radius must be strictly positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("index out of range: {name} = {got}, bound {bound}")]
    IndexOutOfRange {
        name: &'static str,
        got: usize,
        bound: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("snapshot is malformed: {0}")]
    BadSnapshot(String),
}

/// Dirichlet posterior over the `n·d` transition rows of a tabular MDP.
///
/// Row `a·n + x` (0-based) holds the pseudo-counts `α_{s'} + c_t(x, a, s')`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletPosterior {
    n: usize,
    d: usize,
    alpha_total: f64,
    counts: Vec<DVector<f64>>,
}

impl DirichletPosterior {
    /// Initializes every `(state, action)` row to the prior vector `alpha`.
    pub fn new(n: usize, d: usize, alpha: &[f64]) -> Result<Self, PosteriorError> {
        if alpha.len() != n {
            return Err(PosteriorError::DimensionMismatch {
                expected: n,
                got: alpha.len(),
            });
        }
        for &a in alpha {
            if a <= 0.0 || !a.is_finite() {
                return Err(PosteriorError::NonPositiveAlpha(a));
            }
        }
        let row = DVector::from_row_slice(alpha);
        Ok(Self {
            n,
            d,
            alpha_total: row.sum(),
            counts: vec![row; n * d],
        })
    }

    pub fn state_count(&self) -> usize {
        self.n
    }

    pub fn action_count(&self) -> usize {
        self.d
    }

    fn row_index(&self, s: usize, a: usize) -> Result<usize, PosteriorError> {
        if s >= self.n {
            return Err(PosteriorError::IndexOutOfRange {
                name: "state",
                got: s,
                bound: self.n,
            });
        }
        if a >= self.d {
            return Err(PosteriorError::IndexOutOfRange {
                name: "action",
                got: a,
                bound: self.d,
            });
        }
        Ok(a * self.n + s)
    }

    pub fn counts(&self, s: usize, a: usize) -> Result<&DVector<f64>, PosteriorError> {
        Ok(&self.counts[self.row_index(s, a)?])
    }

    /// Number of transitions observed from `(s, a)`.
    pub fn observed(&self, s: usize, a: usize) -> Result<f64, PosteriorError> {
        Ok(self.counts(s, a)?.sum() - self.alpha_total)
    }

    /// Records one observed transition `(s, a) → s_next`.
    pub fn observe(&mut self, s: usize, a: usize, s_next: usize) -> Result<(), PosteriorError> {
        if s_next >= self.n {
            return Err(PosteriorError::IndexOutOfRange {
                name: "next state",
                got: s_next,
                bound: self.n,
            });
        }
        let k = self.row_index(s, a)?;
        self.counts[k][s_next] += 1.0;
        Ok(())
    }

    /// Draws Θ̃ with each row sampled independently from its Dirichlet via
    /// normalized Gamma draws. Every returned row sums to one.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamMatrix {
        let mut theta = DMatrix::zeros(self.n * self.d, self.n);
        for (k, row) in self.counts.iter().enumerate() {
            let mut draws = DVector::zeros(self.n);
            let mut sum = 0.0;
            for (i, &alpha) in row.iter().enumerate() {
                let g: f64 = Gamma::new(alpha, 1.0)
                    .expect("pseudo-counts are positive")
                    .sample(rng);
                draws[i] = g;
                sum += g;
            }
            if sum <= f64::MIN_POSITIVE {
                // All Gamma draws underflowed; fall back to the row mean.
                draws = row / row.sum();
            } else {
                draws /= sum;
            }
            theta.row_mut(k).copy_from(&draws.transpose());
        }
        theta
    }

    /// Posterior mean `Θ̂_t`: entry `(k, s')` equals
    /// `(α_{s'} + c) / Σ_{s''}(α_{s''} + c)`.
    pub fn mean(&self) -> ParamMatrix {
        let mut theta = DMatrix::zeros(self.n * self.d, self.n);
        for (k, row) in self.counts.iter().enumerate() {
            let norm = row / row.sum();
            theta.row_mut(k).copy_from(&norm.transpose());
        }
        theta
    }

    /// Diagonal information matrix implied by the pseudo-counts:
    /// entry `(k, k)` is the total pseudo-count of row `k`.
    pub fn implied_info_matrix(&self) -> InfoMatrix {
        let diag: Vec<f64> = self.counts.iter().map(|r| r.sum()).collect();
        InfoMatrix::from_diagonal(&diag).expect("pseudo-counts are positive")
    }

    pub fn snapshot(&self) -> PosteriorSnapshot {
        PosteriorSnapshot::Dirichlet {
            version: SNAPSHOT_VERSION,
            n: self.n,
            d: self.d,
            counts: self
                .counts
                .iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

/// Column-wise Gaussian posterior for a linear regression parameter
/// `Θ ∈ ℝ^{m×n}` with shared precision `V_t`.
///
/// Observations must be pre-whitened by the known noise scale so the
/// identity-covariance update `V ← V + φφᵀ` applies.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    mean: ParamMatrix,
    precision: InfoMatrix,
    moment: DMatrix<f64>,
    support_radius: Option<f64>,
}

impl GaussianPosterior {
    /// Prior with mean zero and the given precision.
    pub fn new(
        precision: InfoMatrix,
        n: usize,
        support_radius: Option<f64>,
    ) -> Result<Self, PosteriorError> {
        if let Some(r) = support_radius {
            if r <= 0.0 || !r.is_finite() {
                return Err(PosteriorError::NonPositiveRadius(r));
            }
        }
        let m = precision.dim();
        Ok(Self {
            mean: DMatrix::zeros(m, n),
            precision,
            moment: DMatrix::zeros(m, n),
            support_radius,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn mean(&self) -> &ParamMatrix {
        &self.mean
    }

    pub fn precision(&self) -> &InfoMatrix {
        &self.precision
    }

    pub fn support_radius(&self) -> Option<f64> {
        self.support_radius
    }

    /// Absorbs one whitened observation pair `(φ, x_next)`:
    /// `V ← V + φφᵀ`, `moment ← moment + φ·x_nextᵀ`, mean re-solved from the
    /// normal equations.
    pub fn observe(
        &mut self,
        phi: &DVector<f64>,
        x_next: &DVector<f64>,
    ) -> Result<(), PosteriorError> {
        if phi.len() != self.feature_dim() {
            return Err(PosteriorError::DimensionMismatch {
                expected: self.feature_dim(),
                got: phi.len(),
            });
        }
        if x_next.len() != self.output_dim() {
            return Err(PosteriorError::DimensionMismatch {
                expected: self.output_dim(),
                got: x_next.len(),
            });
        }
        self.precision = self.precision.updated(&[(1.0, phi.clone())])?;
        self.moment += phi * x_next.transpose();
        for j in 0..self.output_dim() {
            let col = self.precision.solve(&self.moment.column(j).into_owned());
            self.mean.column_mut(j).copy_from(&col);
        }
        Ok(())
    }

    /// Draws Θ̃ column-wise as `Θ̂_{:,i} + L^{-ᵀ} z`. With a support radius
    /// set, rejects against the Frobenius ball up to 100 times and then
    /// radially projects the last draw onto it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamMatrix {
        let (m, n) = (self.feature_dim(), self.output_dim());
        let mut draw = DMatrix::zeros(m, n);
        for attempt in 0..100 {
            for j in 0..n {
                let z = DVector::from_fn(m, |_, _| rng.sample(rand_distr::StandardNormal));
                let col = self.mean.column(j) + self.precision.whiten_inverse(&z);
                draw.column_mut(j).copy_from(&col);
            }
            match self.support_radius {
                None => return draw,
                Some(r) if draw.norm() <= r => return draw,
                Some(_) if attempt + 1 < 100 => continue,
                Some(_) => break,
            }
        }
        let r = self.support_radius.expect("loop exits early without radius");
        let norm = draw.norm();
        if norm > r {
            draw *= r / norm;
        }
        draw
    }

    /// Residual `‖V·mean − moment‖_F` of the normal equations.
    pub fn normal_equation_residual(&self) -> f64 {
        (self.precision.dense() * &self.mean - &self.moment).norm()
    }

    pub fn snapshot(&self) -> PosteriorSnapshot {
        PosteriorSnapshot::Gaussian {
            version: SNAPSHOT_VERSION,
            m: self.feature_dim(),
            n: self.output_dim(),
            mean: row_major(&self.mean),
            precision: row_major(self.precision.dense()),
            moment: row_major(&self.moment),
            support_radius: self.support_radius,
        }
    }
}

/// Concentration diagnostic `‖(Θ − Θ̂)ᵀ V^{1/2}‖²`, logged at each resample.
pub fn concentration_stat(
    theta: &ParamMatrix,
    mean: &ParamMatrix,
    v: &InfoMatrix,
) -> Result<f64, PosteriorError> {
    if theta.shape() != mean.shape() {
        return Err(PosteriorError::DimensionMismatch {
            expected: mean.nrows(),
            got: theta.nrows(),
        });
    }
    let norm = half_weighted_norm(&(theta - mean), v)?;
    Ok(norm * norm)
}

const SNAPSHOT_VERSION: u32 = 1;

/// Versioned JSON-serializable snapshot for checkpointing. Matrices are
/// stored row-major.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PosteriorSnapshot {
    Dirichlet {
        version: u32,
        n: usize,
        d: usize,
        counts: Vec<Vec<f64>>,
    },
    Gaussian {
        version: u32,
        m: usize,
        n: usize,
        mean: Vec<f64>,
        precision: Vec<f64>,
        moment: Vec<f64>,
        support_radius: Option<f64>,
    },
}

impl PosteriorSnapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PosteriorError> {
        serde_json::from_str(s).map_err(|e| PosteriorError::BadSnapshot(e.to_string()))
    }

    pub fn restore_dirichlet(&self) -> Result<DirichletPosterior, PosteriorError> {
        match self {
            PosteriorSnapshot::Dirichlet {
                version,
                n,
                d,
                counts,
            } => {
                if *version != SNAPSHOT_VERSION {
                    return Err(PosteriorError::BadSnapshot(format!(
                        "unsupported version {version}"
                    )));
                }
                if counts.len() != n * d || counts.is_empty() {
                    return Err(PosteriorError::BadSnapshot(format!(
                        "expected {} rows, got {}",
                        n * d,
                        counts.len()
                    )));
                }
                let mut post = DirichletPosterior::new(*n, *d, &counts[0])?;
                for (k, row) in counts.iter().enumerate() {
                    if row.len() != *n {
                        return Err(PosteriorError::BadSnapshot(format!(
                            "row {k} has length {}",
                            row.len()
                        )));
                    }
                    for &c in row {
                        if c <= 0.0 || !c.is_finite() {
                            return Err(PosteriorError::NonPositiveAlpha(c));
                        }
                    }
                    post.counts[k] = DVector::from_row_slice(row);
                }
                Ok(post)
            }
            _ => Err(PosteriorError::BadSnapshot(
                "not a dirichlet snapshot".into(),
            )),
        }
    }

    pub fn restore_gaussian(&self) -> Result<GaussianPosterior, PosteriorError> {
        match self {
            PosteriorSnapshot::Gaussian {
                version,
                m,
                n,
                mean,
                precision,
                moment,
                support_radius,
            } => {
                if *version != SNAPSHOT_VERSION {
                    return Err(PosteriorError::BadSnapshot(format!(
                        "unsupported version {version}"
                    )));
                }
                if mean.len() != m * n || precision.len() != m * m || moment.len() != m * n {
                    return Err(PosteriorError::BadSnapshot(
                        "field lengths inconsistent".into(),
                    ));
                }
                let prec = InfoMatrix::new(DMatrix::from_row_slice(*m, *m, precision))?;
                let mut post = GaussianPosterior::new(prec, *n, *support_radius)?;
                post.mean = DMatrix::from_row_slice(*m, *n, mean);
                post.moment = DMatrix::from_row_slice(*m, *n, moment);
                let residual = post.normal_equation_residual();
                if residual > 1e-6 * (1.0 + post.moment.norm()) {
                    return Err(PosteriorError::BadSnapshot(format!(
                        "mean and moment violate the normal equations (residual {residual:.3e})"
                    )));
                }
                Ok(post)
            }
            _ => Err(PosteriorError::BadSnapshot(
                "not a gaussian snapshot".into(),
            )),
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}
