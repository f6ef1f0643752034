//! Ground-truth simulators for the two system families, their feature maps
//! and losses, the shared-noise coupled sampler, and the Apache web-server
//! control instance.

use crate::planner::check_row_stochastic;
use crate::ParamMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Mixing weight toward the uniform distribution in generated instances;
/// keeps every deterministic policy's chain unichain and aperiodic.
pub const UNICHAIN_MIXING: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index out of range: {name} = {got}, bound {bound}")]
    IndexOutOfRange {
        name: &'static str,
        got: usize,
        bound: usize,
    },
    #[error("noise scale must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("transition row {row} is not a distribution (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },
    #[error("loss entry ({x},{a}) = {value} outside [0,1]")]
    LossOutOfRange { x: usize, a: usize, value: f64 },
    #[error("matrix {name} fails its definiteness requirement")]
    BadCostMatrix { name: &'static str },
    #[error("uniform draw must lie in [0,1), got {0}")]
    BadUniform(f64),
    #[error("family mismatch: {0}")]
    FamilyMismatch(String),
    #[error("environment spec is malformed: {0}")]
    BadSpec(String),
}

/// Finite MDP with known transition matrix and per-pair losses in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    pub n: usize,
    pub d: usize,
    /// `n·d × n`; row `a·n + x` is the next-state distribution of `(x, a)`.
    pub theta_star: ParamMatrix,
    /// `n × d` loss table.
    pub loss: DMatrix<f64>,
}

impl TabularEnv {
    pub fn new(theta_star: ParamMatrix, loss: DMatrix<f64>) -> Result<Self, EnvError> {
        let n = loss.nrows();
        let d = loss.ncols();
        if theta_star.nrows() != n * d || theta_star.ncols() != n {
            return Err(EnvError::DimensionMismatch {
                expected: n * d,
                got: theta_star.nrows(),
            });
        }
        for k in 0..theta_star.nrows() {
            let sum: f64 = theta_star.row(k).iter().sum();
            if (sum - 1.0).abs() > 1e-12 || theta_star.row(k).iter().any(|&p| p < 0.0) {
                return Err(EnvError::NotStochastic { row: k, sum });
            }
        }
        for x in 0..n {
            for a in 0..d {
                let v = loss[(x, a)];
                if !(0.0..=1.0).contains(&v) {
                    return Err(EnvError::LossOutOfRange { x, a, value: v });
                }
            }
        }
        Ok(Self {
            n,
            d,
            theta_star,
            loss,
        })
    }
}

/// Linear-Gaussian system `x' = A·x + B·a + σ·w` with quadratic stage cost
/// `xᵀQx + aᵀRa` and optional per-coordinate action limits.
#[derive(Debug, Clone)]
pub struct LinearEnv {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sigma: f64,
    pub action_box: Option<Vec<(f64, f64)>>,
}

impl LinearEnv {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        sigma: f64,
        action_box: Option<Vec<(f64, f64)>>,
    ) -> Result<Self, EnvError> {
        let n = a.nrows();
        let d = b.ncols();
        if a.ncols() != n || b.nrows() != n {
            return Err(EnvError::DimensionMismatch {
                expected: n,
                got: b.nrows(),
            });
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(EnvError::DimensionMismatch {
                expected: n,
                got: q.nrows(),
            });
        }
        if r.nrows() != d || r.ncols() != d {
            return Err(EnvError::DimensionMismatch {
                expected: d,
                got: r.nrows(),
            });
        }
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(EnvError::NonPositiveSigma(sigma));
        }
        if !is_symmetric_psd(&q) {
            return Err(EnvError::BadCostMatrix { name: "Q" });
        }
        if nalgebra::Cholesky::new(r.clone()).is_none() {
            return Err(EnvError::BadCostMatrix { name: "R" });
        }
        if let Some(limits) = &action_box {
            if limits.len() != d {
                return Err(EnvError::DimensionMismatch {
                    expected: d,
                    got: limits.len(),
                });
            }
        }
        Ok(Self {
            a,
            b,
            q,
            r,
            sigma,
            action_box,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Stacked parameter Θ with `Θᵀ = (A, B)`.
    pub fn theta_star(&self) -> ParamMatrix {
        let n = self.state_dim();
        let d = self.action_dim();
        let mut theta = DMatrix::zeros(n + d, n);
        theta.view_mut((0, 0), (n, n)).copy_from(&self.a.transpose());
        theta.view_mut((n, 0), (d, n)).copy_from(&self.b.transpose());
        theta
    }
}

fn is_symmetric_psd(m: &DMatrix<f64>) -> bool {
    let scale = 1.0 + m.amax();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                return false;
            }
        }
    }
    nalgebra::SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .all(|&l| l >= -1e-9 * scale)
}

/// Indicator feature of the pair `(x, a)`: the unit vector in `ℝ^{n·d}`
/// with a one at index `a·n + x` (0-based).
pub fn feature_map_tabular(
    x: usize,
    a: usize,
    n: usize,
    d: usize,
) -> Result<DVector<f64>, EnvError> {
    if x >= n {
        return Err(EnvError::IndexOutOfRange {
            name: "state",
            got: x,
            bound: n,
        });
    }
    if a >= d {
        return Err(EnvError::IndexOutOfRange {
            name: "action",
            got: a,
            bound: d,
        });
    }
    let mut phi = DVector::zeros(n * d);
    phi[a * n + x] = 1.0;
    Ok(phi)
}

/// Stacked LQ feature `φ(x, a)ᵀ = (xᵀ, aᵀ)`.
pub fn feature_map_linear(x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
    let mut phi = DVector::zeros(x.len() + a.len());
    phi.rows_mut(0, x.len()).copy_from(x);
    phi.rows_mut(x.len(), a.len()).copy_from(a);
    phi
}

/// Samples the next state of `(x, a)` by inverse CDF over states in index
/// order: the smallest `s'` with cumulative probability above `z`.
pub fn tabular_step(env: &TabularEnv, x: usize, a: usize, z: f64) -> Result<usize, EnvError> {
    if !(0.0..1.0).contains(&z) {
        return Err(EnvError::BadUniform(z));
    }
    tabular_row_step(&env.theta_star, env.n, x, a, z)
}

fn tabular_row_step(
    theta: &ParamMatrix,
    n: usize,
    x: usize,
    a: usize,
    z: f64,
) -> Result<usize, EnvError> {
    let k = a * n + x;
    if k >= theta.nrows() || x >= n {
        return Err(EnvError::IndexOutOfRange {
            name: "state-action",
            got: k,
            bound: theta.nrows(),
        });
    }
    let mut cum = 0.0;
    for s_next in 0..n {
        cum += theta[(k, s_next)];
        if cum > z {
            return Ok(s_next);
        }
    }
    Ok(n - 1)
}

/// Inverse standard normal CDF, the map from the shared uniform draws of
/// the coupling construction to Gaussian noise.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(p.clamp(f64::MIN_POSITIVE, 1.0 - 1e-16))
}

/// Advances the linear system one step with noise `σ·Φ^{-1}(z_i)` per
/// coordinate. Returns the next state and whether the action was clipped
/// against the action box.
pub fn linear_step(
    env: &LinearEnv,
    x: &DVector<f64>,
    a: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<(DVector<f64>, bool), EnvError> {
    let n = env.state_dim();
    if x.len() != n {
        return Err(EnvError::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    if a.len() != env.action_dim() {
        return Err(EnvError::DimensionMismatch {
            expected: env.action_dim(),
            got: a.len(),
        });
    }
    if z.len() != n {
        return Err(EnvError::DimensionMismatch {
            expected: n,
            got: z.len(),
        });
    }
    let (a_used, clipped) = clip_action(env, a);
    let noise = DVector::from_fn(n, |i, _| env.sigma * inverse_normal_cdf(z[i]));
    Ok((&env.a * x + &env.b * &a_used + noise, clipped))
}

/// Clamps an action to the box when one is configured.
pub fn clip_action(env: &LinearEnv, a: &DVector<f64>) -> (DVector<f64>, bool) {
    match &env.action_box {
        None => (a.clone(), false),
        Some(limits) => {
            let mut clipped = false;
            let out = DVector::from_fn(a.len(), |i, _| {
                let (lo, hi) = limits[i];
                let v = a[i].clamp(lo, hi);
                if v != a[i] {
                    clipped = true;
                }
                v
            });
            (out, clipped)
        }
    }
}

/// Per-family randomness for the coupled sampler. The linear family shares
/// one uniform vector between both parameters; the tabular family uses
/// independent draws, matching the computation backing its smoothness
/// constant.
#[derive(Debug, Clone)]
pub enum CouplingNoise {
    Tabular { z: f64, z_prime: f64 },
    Linear { z: DVector<f64> },
}

/// Next states of the same `(x, a)` under two parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum CoupledNext {
    Tabular(usize, usize),
    Linear(DVector<f64>, DVector<f64>),
}

/// Evaluates the transition function under Θ and Θ' with coupled
/// randomness. For the linear family the difference is exactly
/// `(Θ−Θ')ᵀφ`; the tabular family draws the two next states independently.
pub fn coupled_next_states(
    x_a: &CoupledQuery,
    theta: &ParamMatrix,
    theta_prime: &ParamMatrix,
    noise: &CouplingNoise,
) -> Result<CoupledNext, EnvError> {
    if theta.shape() != theta_prime.shape() {
        return Err(EnvError::DimensionMismatch {
            expected: theta.nrows(),
            got: theta_prime.nrows(),
        });
    }
    match (x_a, noise) {
        (CoupledQuery::Tabular { x, a, n }, CouplingNoise::Tabular { z, z_prime }) => {
            check_row_stochastic(theta).map_err(|_| {
                EnvError::NotStochastic {
                    row: a * n + x,
                    sum: theta.row(a * n + x).iter().sum(),
                }
            })?;
            check_row_stochastic(theta_prime).map_err(|_| {
                EnvError::NotStochastic {
                    row: a * n + x,
                    sum: theta_prime.row(a * n + x).iter().sum(),
                }
            })?;
            let y = tabular_row_step(theta, *n, *x, *a, *z)?;
            let y_prime = tabular_row_step(theta_prime, *n, *x, *a, *z_prime)?;
            Ok(CoupledNext::Tabular(y, y_prime))
        }
        (CoupledQuery::Linear { x, a, sigma }, CouplingNoise::Linear { z }) => {
            let phi = feature_map_linear(x, a);
            if theta.nrows() != phi.len() {
                return Err(EnvError::DimensionMismatch {
                    expected: phi.len(),
                    got: theta.nrows(),
                });
            }
            if z.len() != theta.ncols() {
                return Err(EnvError::DimensionMismatch {
                    expected: theta.ncols(),
                    got: z.len(),
                });
            }
            let noise = DVector::from_fn(theta.ncols(), |i, _| sigma * inverse_normal_cdf(z[i]));
            let y = theta.transpose() * &phi + &noise;
            let y_prime = theta_prime.transpose() * &phi + &noise;
            Ok(CoupledNext::Linear(y, y_prime))
        }
        _ => Err(EnvError::FamilyMismatch(
            "query and noise belong to different families".into(),
        )),
    }
}

/// State-action query for [`coupled_next_states`].
#[derive(Debug, Clone)]
pub enum CoupledQuery {
    Tabular { x: usize, a: usize, n: usize },
    Linear {
        x: DVector<f64>,
        a: DVector<f64>,
        sigma: f64,
    },
}

/// Quadratic stage cost `xᵀQx + aᵀRa`.
pub fn quadratic_loss(
    x: &DVector<f64>,
    a: &DVector<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<f64, EnvError> {
    if x.len() != q.nrows() {
        return Err(EnvError::DimensionMismatch {
            expected: q.nrows(),
            got: x.len(),
        });
    }
    if a.len() != r.nrows() {
        return Err(EnvError::DimensionMismatch {
            expected: r.nrows(),
            got: a.len(),
        });
    }
    Ok((x.transpose() * q * x)[(0, 0)] + (a.transpose() * r * a)[(0, 0)])
}

/// The Apache web-server control model: identified dynamics around the
/// operating point, cost matrices `Q = diag(5, 1)` and
/// `R = diag(1/50², 0.1⁶)`, and the given noise standard deviation.
pub fn web_server_instance(sigma: f64) -> Result<LinearEnv, EnvError> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(EnvError::NonPositiveSigma(sigma));
    }
    let a = DMatrix::from_row_slice(2, 2, &[0.54, -0.11, -0.026, 0.63]);
    let b = DMatrix::from_row_slice(2, 2, &[-85e-4, 4.4e-4, -2.5e-4, 2.8e-4]);
    let q = DMatrix::from_row_slice(2, 2, &[5.0, 0.0, 0.0, 1.0]);
    let r = DMatrix::from_row_slice(2, 2, &[1.0 / 2500.0, 0.0, 0.0, 1e-6]);
    LinearEnv::new(a, b, q, r, sigma, None)
}

/// Raw KeepAlive/MaxClients bounds expressed as deviations from the
/// operating point `(11, 600)`: KeepAlive spans `[1, 20]` seconds and
/// MaxClients `[1, 1024]` processes, so each box contains zero.
pub fn web_server_action_box() -> Vec<(f64, f64)> {
    vec![(1.0 - 11.0, 20.0 - 11.0), (1.0 - 600.0, 1024.0 - 600.0)]
}

/// Random unichain tabular instance: each transition row is a uniform
/// simplex draw mixed with the uniform distribution, losses uniform in
/// `[0, 1]`.
pub fn random_unichain(n: usize, d: usize, seed: u64) -> TabularEnv {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    random_unichain_from(n, d, &mut rng)
}

pub fn random_unichain_from<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> TabularEnv {
    let gamma = Gamma::new(1.0, 1.0).expect("unit gamma");
    let mut theta = DMatrix::zeros(n * d, n);
    for k in 0..n * d {
        let mut row = DVector::from_fn(n, |_, _| gamma.sample(rng));
        row /= row.sum();
        for y in 0..n {
            theta[(k, y)] = (1.0 - UNICHAIN_MIXING) * row[y] + UNICHAIN_MIXING / n as f64;
        }
        // Renormalize exactly so TabularEnv's 1e-12 check holds.
        let sum: f64 = theta.row(k).iter().sum();
        for y in 0..n {
            theta[(k, y)] /= sum;
        }
    }
    let loss = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
    TabularEnv::new(theta, loss).expect("generated instance is valid")
}

/// Either family behind one handle, as resolved from a config.
#[derive(Debug, Clone)]
pub enum EnvModel {
    Tabular(TabularEnv),
    Linear(LinearEnv),
}

/// JSON representation of an environment. Matrices are nested arrays in
/// row-major order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    Tabular {
        n: usize,
        d: usize,
        theta: Vec<Vec<f64>>,
        loss: Vec<Vec<f64>>,
    },
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        sigma: f64,
        #[serde(default)]
        action_box: Option<Vec<(f64, f64)>>,
    },
}

fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, EnvError> {
    if rows.is_empty() {
        return Err(EnvError::BadSpec(format!("matrix {name} is empty")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(EnvError::BadSpec(format!("matrix {name} is ragged")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl EnvSpec {
    pub fn from_model(model: &EnvModel) -> Self {
        match model {
            EnvModel::Tabular(env) => EnvSpec::Tabular {
                n: env.n,
                d: env.d,
                theta: matrix_to_rows(&env.theta_star),
                loss: matrix_to_rows(&env.loss),
            },
            EnvModel::Linear(env) => EnvSpec::Linear {
                a: matrix_to_rows(&env.a),
                b: matrix_to_rows(&env.b),
                q: matrix_to_rows(&env.q),
                r: matrix_to_rows(&env.r),
                sigma: env.sigma,
                action_box: env.action_box.clone(),
            },
        }
    }

    pub fn to_model(&self) -> Result<EnvModel, EnvError> {
        match self {
            EnvSpec::Tabular { n, d, theta, loss } => {
                let theta = matrix_from_rows(theta, "theta")?;
                let loss = matrix_from_rows(loss, "loss")?;
                if loss.nrows() != *n || loss.ncols() != *d {
                    return Err(EnvError::BadSpec(format!(
                        "loss table is {}x{}, expected {n}x{d}",
                        loss.nrows(),
                        loss.ncols()
                    )));
                }
                Ok(EnvModel::Tabular(TabularEnv::new(theta, loss)?))
            }
            EnvSpec::Linear {
                a,
                b,
                q,
                r,
                sigma,
                action_box,
            } => {
                let a = matrix_from_rows(a, "a")?;
                let b = matrix_from_rows(b, "b")?;
                let q = matrix_from_rows(q, "q")?;
                let r = matrix_from_rows(r, "r")?;
                Ok(EnvModel::Linear(LinearEnv::new(
                    a,
                    b,
                    q,
                    r,
                    *sigma,
                    action_box.clone(),
                )?))
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EnvError> {
        serde_json::from_str(s).map_err(|e| EnvError::BadSpec(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use statrs::distribution::ChiSquared;

    #[test]
    fn feature_map_places_single_one() {
        let phi = feature_map_tabular(1, 0, 3, 2).unwrap();
        assert_eq!(phi.as_slice(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let phi = feature_map_tabular(0, 1, 3, 2).unwrap();
        assert_eq!(phi.as_slice(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(feature_map_tabular(3, 0, 3, 2).is_err());
    }

    #[test]
    fn feature_map_indices_are_a_bijection() {
        let (n, d) = (4, 3);
        let mut seen = vec![false; n * d];
        for x in 0..n {
            for a in 0..d {
                let phi = feature_map_tabular(x, a, n, d).unwrap();
                let idx = phi.iter().position(|&v| v == 1.0).unwrap();
                assert!(!seen[idx], "index {idx} hit twice");
                seen[idx] = true;
                assert_eq!(phi.iter().filter(|&&v| v != 0.0).count(), 1);
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn tabular_step_inverse_cdf() {
        let theta = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5]);
        let loss = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let env = TabularEnv::new(theta, loss).unwrap();
        for z in [0.0, 0.3, 0.999] {
            assert_eq!(tabular_step(&env, 0, 0, z).unwrap(), 0);
        }
        assert_eq!(tabular_step(&env, 1, 0, 0.25).unwrap(), 0);
        assert_eq!(tabular_step(&env, 1, 0, 0.75).unwrap(), 1);
        assert!(tabular_step(&env, 0, 0, 1.0).is_err());
    }

    #[test]
    fn tabular_step_frequencies_match_row() {
        let theta = DMatrix::from_row_slice(1, 3, &[0.2, 0.3, 0.5]);
        let loss = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 0.0]);
        // Single action, three states: rows for states 1 and 2 unused here.
        let theta_full = DMatrix::from_row_slice(
            3,
            3,
            &[0.2, 0.3, 0.5, 0.2, 0.3, 0.5, 0.2, 0.3, 0.5],
        );
        let env = TabularEnv::new(theta_full, loss).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let draws = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[tabular_step(&env, 0, 0, rng.random::<f64>()).unwrap()] += 1;
        }
        let expected = [0.2, 0.3, 0.5];
        let mut chi2 = 0.0;
        for s in 0..3 {
            let freq = counts[s] as f64 / draws as f64;
            assert!((freq - expected[s]).abs() < 0.01, "state {s}: {freq}");
            let e = expected[s] * draws as f64;
            chi2 += (counts[s] as f64 - e).powi(2) / e;
        }
        let crit = ChiSquared::new(2.0).unwrap().inverse_cdf(0.99);
        assert!(chi2 < crit, "chi-square {chi2} vs critical {crit}");
        let _ = theta;
    }

    #[test]
    fn linear_step_zero_noise_limits() {
        let env = LinearEnv::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            1e-300,
            None,
        )
        .unwrap();
        let x = DVector::from_row_slice(&[0.3, -0.4]);
        let z = DVector::from_row_slice(&[0.5, 0.5]);
        let (next, clipped) = linear_step(&env, &x, &DVector::zeros(1), &z).unwrap();
        assert!(!clipped);
        assert_relative_eq!((next - &x).norm(), 0.0, epsilon = 1e-12);

        let (next, _) =
            linear_step(&env, &DVector::zeros(2), &DVector::zeros(1), &z).unwrap();
        assert_relative_eq!(next.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_step_mean_matches_dynamics() {
        let env = web_server_instance(0.5).unwrap();
        let x = DVector::from_row_slice(&[0.2, -0.1]);
        let a = DVector::from_row_slice(&[1.0, 2.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let draws = 100_000;
        let mut acc = DVector::zeros(2);
        for _ in 0..draws {
            let z = DVector::from_fn(2, |_, _| rng.random::<f64>());
            let (next, _) = linear_step(&env, &x, &a, &z).unwrap();
            acc += next;
        }
        acc /= draws as f64;
        let mean = &env.a * &x + &env.b * &a;
        let tol = 3.0 * env.sigma / (draws as f64).sqrt();
        for i in 0..2 {
            assert!(
                (acc[i] - mean[i]).abs() < tol,
                "coordinate {i}: {} vs {}",
                acc[i],
                mean[i]
            );
        }
    }

    #[test]
    fn action_clipping_flags_and_clamps() {
        let mut env = web_server_instance(0.1).unwrap();
        env.action_box = Some(web_server_action_box());
        let x = DVector::zeros(2);
        let z = DVector::from_row_slice(&[0.5, 0.5]);
        let wild = DVector::from_row_slice(&[100.0, -1000.0]);
        let (_, clipped) = linear_step(&env, &x, &wild, &z).unwrap();
        assert!(clipped);
        let (a_used, _) = clip_action(&env, &wild);
        assert_eq!(a_used[0], 9.0);
        assert_eq!(a_used[1], -599.0);
        let (_, not_clipped) = linear_step(&env, &x, &DVector::zeros(2), &z).unwrap();
        assert!(!not_clipped);
    }

    #[test]
    fn coupled_linear_difference_is_exact() {
        let env = web_server_instance(1.0).unwrap();
        let theta = env.theta_star();
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let theta_prime =
            &theta + DMatrix::from_fn(4, 2, |_, _| 0.1 * (rng.random::<f64>() - 0.5));
        let x = DVector::from_row_slice(&[0.4, -0.2]);
        let a = DVector::from_row_slice(&[1.0, -1.0]);
        let query = CoupledQuery::Linear {
            x: x.clone(),
            a: a.clone(),
            sigma: env.sigma,
        };
        let z = DVector::from_fn(2, |_, _| rng.random::<f64>());
        let noise = CouplingNoise::Linear { z };

        // Same parameter: identical next states.
        match coupled_next_states(&query, &theta, &theta, &noise).unwrap() {
            CoupledNext::Linear(y, y_prime) => assert_eq!(y, y_prime),
            _ => panic!("wrong family"),
        }

        // Different parameters: difference equals (Θ−Θ')ᵀφ exactly.
        let phi = feature_map_linear(&x, &a);
        match coupled_next_states(&query, &theta, &theta_prime, &noise).unwrap() {
            CoupledNext::Linear(y, y_prime) => {
                let expect = (&theta - &theta_prime).transpose() * &phi;
                assert_relative_eq!((y - y_prime - expect).norm(), 0.0, epsilon = 1e-12);
            }
            _ => panic!("wrong family"),
        }
    }

    #[test]
    fn coupled_family_mismatch_is_rejected() {
        let theta = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let query = CoupledQuery::Tabular { x: 0, a: 0, n: 2 };
        let noise = CouplingNoise::Linear {
            z: DVector::zeros(2),
        };
        assert!(matches!(
            coupled_next_states(&query, &theta, &theta, &noise),
            Err(EnvError::FamilyMismatch(_))
        ));
    }

    #[test]
    fn coupled_tabular_expected_distance() {
        // E‖y − y'‖ over independent draws equals √2·(1 − θᵀθ').
        let theta = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.5, 0.5]);
        let theta_prime = DMatrix::from_row_slice(2, 2, &[0.2, 0.8, 0.5, 0.5]);
        let target = (2.0f64).sqrt() * (1.0 - (0.7 * 0.2 + 0.3 * 0.8));
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let noise = CouplingNoise::Tabular {
                z: rng.random::<f64>(),
                z_prime: rng.random::<f64>(),
            };
            let query = CoupledQuery::Tabular { x: 0, a: 0, n: 2 };
            match coupled_next_states(&query, &theta, &theta_prime, &noise).unwrap() {
                CoupledNext::Tabular(y, y_prime) => {
                    if y != y_prime {
                        acc += (2.0f64).sqrt();
                    }
                }
                _ => panic!("wrong family"),
            }
        }
        let emp = acc / draws as f64;
        assert!(
            (emp - target).abs() <= 0.02 * target,
            "empirical {emp} vs target {target}"
        );
    }

    #[test]
    fn web_server_matrices_are_exact() {
        let env = web_server_instance(0.1).unwrap();
        assert_eq!(env.a[(0, 0)], 0.54);
        assert_eq!(env.a[(0, 1)], -0.11);
        assert_eq!(env.a[(1, 0)], -0.026);
        assert_eq!(env.a[(1, 1)], 0.63);
        assert_eq!(env.b[(0, 0)], -85e-4);
        assert_eq!(env.b[(1, 1)], 2.8e-4);
        assert_eq!(env.q[(0, 0)], 5.0);
        assert_eq!(env.q[(1, 1)], 1.0);
        assert_relative_eq!(env.r[(0, 0)], 4e-4, epsilon = 1e-18);
        assert_eq!(env.r[(1, 1)], 1e-6);
        assert!(env.action_box.is_none());

        assert!(web_server_instance(1.0).is_ok());
        assert!(matches!(
            web_server_instance(0.0),
            Err(EnvError::NonPositiveSigma(_))
        ));
    }

    #[test]
    fn quadratic_loss_cases() {
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::zeros(2, 2);
        let zero = DVector::zeros(2);
        assert_eq!(quadratic_loss(&zero, &zero, &q, &r).unwrap(), 0.0);
        let x = DVector::from_row_slice(&[3.0, 4.0]);
        assert_relative_eq!(quadratic_loss(&x, &zero, &q, &r).unwrap(), 25.0);

        let env = web_server_instance(0.1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        for _ in 0..10 {
            let x = DVector::from_fn(2, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let a = DVector::from_fn(2, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let got = quadratic_loss(&x, &a, &env.q, &env.r).unwrap();
            // Naive double-loop quadratic form.
            let mut want = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    want += x[i] * env.q[(i, j)] * x[j] + a[i] * env.r[(i, j)] * a[j];
                }
            }
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }
        assert!(quadratic_loss(&DVector::zeros(1), &zero, &q, &r).is_err());
    }

    #[test]
    fn generated_instances_are_unichain() {
        for seed in 0..5 {
            let env = random_unichain(4, 2, seed);
            // Every deterministic policy admits a converging stationary
            // distribution, which is what the brute-force oracle needs.
            assert!(crate::planner::brute_force_avg_cost(&env.theta_star, &env.loss).is_ok());
        }
    }

    #[test]
    fn env_spec_round_trip() {
        let model = EnvModel::Linear(web_server_instance(0.1).unwrap());
        let json = EnvSpec::from_model(&model).to_json();
        let back = EnvSpec::from_json(&json).unwrap().to_model().unwrap();
        match back {
            EnvModel::Linear(env) => {
                assert_eq!(env.a[(0, 0)], 0.54);
                assert_eq!(env.sigma, 0.1);
            }
            _ => panic!("wrong family"),
        }

        let model = EnvModel::Tabular(random_unichain(3, 2, 1));
        let json = EnvSpec::from_model(&model).to_json();
        let back = EnvSpec::from_json(&json).unwrap().to_model().unwrap();
        match back {
            EnvModel::Tabular(env) => assert_eq!(env.n, 3),
            _ => panic!("wrong family"),
        }
    }

}
