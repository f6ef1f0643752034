//! Average-cost planners: relative value iteration for tabular MDPs and a
//! Riccati fixed-point solver for linear-quadratic systems, plus the
//! brute-force policy-enumeration oracle used to cross-check them.

use crate::ParamMatrix;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Damping factor of the aperiodicity transform applied inside relative
/// value iteration. The transformed chain `(1−τ)·I + τ·P` has the same
/// average cost and scaled bias, and converges on periodic instances where
/// plain iteration oscillates.
const APERIODICITY_TAU: f64 = 0.5;

/// Iteration cap for relative value iteration.
const ACOE_MAX_ITER: usize = 1_000_000;

/// Row-stochasticity tolerance on transition matrices.
const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("transition matrix is not row-stochastic: row {row} sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("tolerance must be positive, got {0}")]
    NonPositiveTolerance(f64),
    #[error(
        "relative value iteration did not converge within {iterations} iterations \
         on the {n}-state {d}-action instance (span {span:.3e}); the instance \
         likely violates the unichain/aperiodicity requirements"
    )]
    AcoeNoConvergence {
        n: usize,
        d: usize,
        iterations: usize,
        span: f64,
    },
    #[error("matrix {name} must be symmetric")]
    NotSymmetric { name: &'static str },
    #[error("matrix {name} must be positive definite")]
    NotPositiveDefinite { name: &'static str },
    #[error(
        "Riccati iteration did not converge within {iterations} iterations \
         (last change {change:.3e}); the sampled system is likely unstabilizable"
    )]
    DareNoConvergence { iterations: usize, change: f64 },
    #[error("state index {got} out of range for {bound} states")]
    StateOutOfRange { got: usize, bound: usize },
    #[error("policy enumeration too large: d^n = {size} exceeds {limit}")]
    EnumerationTooLarge { size: f64, limit: f64 },
    #[error("stationary distribution iteration did not converge; chain may be periodic")]
    StationaryNoConvergence,
}

/// Solution of the average-cost optimality equation for a tabular MDP.
///
/// `bias` is normalized to `min_x h(x) = 0`; `avg_cost` is the midpoint of
/// the final span bracket and `sigma` bounds the ACOE residual
/// `max_x |J + h(x) − min_a{ℓ(x,a) + Σ p·h}|`.
#[derive(Debug, Clone)]
pub struct AcoeSolution {
    pub avg_cost: f64,
    pub bias: Vec<f64>,
    pub policy: Vec<usize>,
    pub sigma: f64,
}

impl AcoeSolution {
    /// Largest ACOE residual of this solution under `(theta, loss)`.
    pub fn residual(&self, theta: &ParamMatrix, loss: &DMatrix<f64>) -> f64 {
        let n = loss.nrows();
        let d = loss.ncols();
        let mut worst = 0.0f64;
        for x in 0..n {
            let mut best = f64::INFINITY;
            for a in 0..d {
                let mut q = loss[(x, a)];
                for y in 0..n {
                    q += theta[(a * n + x, y)] * self.bias[y];
                }
                best = best.min(q);
            }
            worst = worst.max((self.avg_cost + self.bias[x] - best).abs());
        }
        worst
    }
}

/// Solution of the discrete algebraic Riccati equation.
#[derive(Debug, Clone)]
pub struct LqSolution {
    /// Symmetric PSD value matrix.
    pub p: DMatrix<f64>,
    /// Gain matrix; the optimal control is `a = −K·x`.
    pub k: DMatrix<f64>,
    /// Frobenius residual of the Riccati fixed point.
    pub dare_residual: f64,
}

impl LqSolution {
    /// Average cost `σ²·trace(P)` for isotropic noise of standard
    /// deviation `noise_std`.
    pub fn avg_cost(&self, noise_std: f64) -> f64 {
        noise_std * noise_std * self.p.trace()
    }
}

pub(crate) fn check_row_stochastic(theta: &ParamMatrix) -> Result<(), PlannerError> {
    for k in 0..theta.nrows() {
        let row = theta.row(k);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&p| p < -STOCHASTIC_TOL) {
            return Err(PlannerError::NotStochastic { row: k, sum });
        }
    }
    Ok(())
}

/// Solves `J + h(x) = min_a { ℓ(x,a) + Σ_y p(y|x,a,Θ) h(y) }` by relative
/// value iteration with reference state 0.
///
/// Stops when the span of successive bias differences falls below
/// `eps_span`; `J` is the midpoint of the final span bracket, `sigma`
/// equals `eps_span`, and argmin ties break toward the lowest action index.
pub fn solve_acoe_tabular(
    theta: &ParamMatrix,
    loss: &DMatrix<f64>,
    eps_span: f64,
) -> Result<AcoeSolution, PlannerError> {
    let n = loss.nrows();
    let d = loss.ncols();
    if eps_span <= 0.0 || !eps_span.is_finite() {
        return Err(PlannerError::NonPositiveTolerance(eps_span));
    }
    if theta.nrows() != n * d || theta.ncols() != n {
        return Err(PlannerError::DimensionMismatch {
            expected: n * d,
            got: theta.nrows(),
        });
    }
    check_row_stochastic(theta)?;

    let tau = APERIODICITY_TAU;
    let mut h = vec![0.0f64; n];
    let mut apply = vec![0.0f64; n];
    let mut argmin = vec![0usize; n];
    let mut span = f64::INFINITY;
    for _ in 0..ACOE_MAX_ITER {
        for x in 0..n {
            let mut best = f64::INFINITY;
            let mut best_a = 0;
            for a in 0..d {
                let mut expect = 0.0;
                for y in 0..n {
                    expect += theta[(a * n + x, y)] * h[y];
                }
                let q = loss[(x, a)] + (1.0 - tau) * h[x] + tau * expect;
                if q < best {
                    best = q;
                    best_a = a;
                }
            }
            apply[x] = best;
            argmin[x] = best_a;
        }
        let mut gmin = f64::INFINITY;
        let mut gmax = f64::NEG_INFINITY;
        for x in 0..n {
            let g = apply[x] - h[x];
            gmin = gmin.min(g);
            gmax = gmax.max(g);
        }
        span = gmax - gmin;
        if span < eps_span {
            let avg_cost = 0.5 * (gmin + gmax);
            let hmin = h.iter().cloned().fold(f64::INFINITY, f64::min);
            // The transformed bias is h/τ; scale back and shift to min 0.
            let bias: Vec<f64> = h.iter().map(|v| tau * (v - hmin)).collect();
            return Ok(AcoeSolution {
                avg_cost,
                bias,
                policy: argmin,
                sigma: eps_span,
            });
        }
        let shift = apply[0];
        for x in 0..n {
            h[x] = apply[x] - shift;
        }
    }
    Err(PlannerError::AcoeNoConvergence {
        n,
        d,
        iterations: ACOE_MAX_ITER,
        span,
    })
}

/// Greedy action `argmin_a { ℓ(x,a) + Σ_y p(y|x,a,Θ) h(y) }`, ties broken
/// toward the lowest index. Together with `sol.sigma` this satisfies the
/// σ-suboptimality contract of the planning oracle.
pub fn greedy_action_tabular(
    sol: &AcoeSolution,
    theta: &ParamMatrix,
    loss: &DMatrix<f64>,
    x: usize,
) -> Result<usize, PlannerError> {
    let n = loss.nrows();
    let d = loss.ncols();
    if x >= n {
        return Err(PlannerError::StateOutOfRange { got: x, bound: n });
    }
    if sol.bias.len() != n {
        return Err(PlannerError::DimensionMismatch {
            expected: n,
            got: sol.bias.len(),
        });
    }
    if theta.nrows() != n * d || theta.ncols() != n {
        return Err(PlannerError::DimensionMismatch {
            expected: n * d,
            got: theta.nrows(),
        });
    }
    let mut best = f64::INFINITY;
    let mut best_a = 0;
    for a in 0..d {
        let mut q = loss[(x, a)];
        for y in 0..n {
            q += theta[(a * n + x, y)] * sol.bias[y];
        }
        if q < best {
            best = q;
            best_a = a;
        }
    }
    Ok(best_a)
}

fn check_symmetric(m: &DMatrix<f64>, name: &'static str) -> Result<(), PlannerError> {
    let scale = 1.0 + m.amax();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                return Err(PlannerError::NotSymmetric { name });
            }
        }
    }
    Ok(())
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration
/// `P ← Q + AᵀPA − AᵀPB(R + BᵀPB)^{-1}BᵀPA` from `P₀ = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<LqSolution, PlannerError> {
    let n = a.nrows();
    let d = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(PlannerError::DimensionMismatch {
            expected: n,
            got: b.nrows(),
        });
    }
    if r.nrows() != d || r.ncols() != d {
        return Err(PlannerError::DimensionMismatch {
            expected: d,
            got: r.nrows(),
        });
    }
    if tol <= 0.0 || !tol.is_finite() {
        return Err(PlannerError::NonPositiveTolerance(tol));
    }
    check_symmetric(q, "Q")?;
    check_symmetric(r, "R")?;
    if nalgebra::Cholesky::new(r.clone()).is_none() {
        return Err(PlannerError::NotPositiveDefinite { name: "R" });
    }

    let step = |p: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let at_p = a.transpose() * p;
        let bt_p_b = b.transpose() * p * b;
        let inner = nalgebra::Cholesky::new(r + bt_p_b)?;
        let gain = inner.solve(&(b.transpose() * p * a));
        let next = q + &at_p * a - &at_p * b * &gain;
        Some((&next + next.transpose()) * 0.5)
    };

    let mut p = q.clone();
    let mut change = f64::INFINITY;
    for it in 0..max_iter {
        let next = step(&p).ok_or(PlannerError::DareNoConvergence {
            iterations: it,
            change,
        })?;
        change = (&next - &p).norm();
        p = next;
        if p.norm() > 1e12 {
            // Diverging cost-to-go: unstabilizable sample, fail fast.
            return Err(PlannerError::DareNoConvergence {
                iterations: it,
                change,
            });
        }
        if change < tol {
            let bt_p_b = b.transpose() * &p * b;
            let chol =
                nalgebra::Cholesky::new(r + bt_p_b).ok_or(PlannerError::NotPositiveDefinite {
                    name: "R + BᵀPB",
                })?;
            let k = chol.solve(&(b.transpose() * &p * a));
            let rebuilt = step(&p).expect("fixed point re-evaluation");
            let dare_residual = (&rebuilt - &p).norm();
            return Ok(LqSolution {
                p,
                k,
                dare_residual,
            });
        }
    }
    Err(PlannerError::DareNoConvergence {
        iterations: max_iter,
        change,
    })
}

/// LQ control `a = −K·x`.
pub fn lq_action(sol: &LqSolution, x: &DVector<f64>) -> Result<DVector<f64>, PlannerError> {
    if x.len() != sol.k.ncols() {
        return Err(PlannerError::DimensionMismatch {
            expected: sol.k.ncols(),
            got: x.len(),
        });
    }
    Ok(-(&sol.k * x))
}

/// Stationary distribution of a row-stochastic chain by power iteration
/// from the uniform distribution (up to `10^5` iterations, `1e-12` L1
/// convergence).
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>, PlannerError> {
    let n = p.nrows();
    if p.ncols() != n {
        return Err(PlannerError::DimensionMismatch {
            expected: n,
            got: p.ncols(),
        });
    }
    check_row_stochastic(p)?;
    let mut mu = DVector::repeat(n, 1.0 / n as f64);
    for _ in 0..100_000 {
        let next = p.transpose() * &mu;
        let diff: f64 = (&next - &mu).abs().sum();
        mu = next;
        if diff < 1e-12 {
            return Ok(mu);
        }
    }
    Err(PlannerError::StationaryNoConvergence)
}

/// Long-run average cost of a deterministic stationary policy.
pub fn eval_policy_avg_cost(
    theta: &ParamMatrix,
    loss: &DMatrix<f64>,
    policy: &[usize],
) -> Result<f64, PlannerError> {
    let n = loss.nrows();
    if policy.len() != n {
        return Err(PlannerError::DimensionMismatch {
            expected: n,
            got: policy.len(),
        });
    }
    let mut chain = DMatrix::zeros(n, n);
    for x in 0..n {
        let a = policy[x];
        for y in 0..n {
            chain[(x, y)] = theta[(a * n + x, y)];
        }
    }
    let mu = stationary_distribution(&chain)?;
    Ok((0..n).map(|x| mu[x] * loss[(x, policy[x])]).sum())
}

/// Optimal average cost by enumerating all `d^n` deterministic stationary
/// policies. Test oracle; assumes unichain instances.
pub fn brute_force_avg_cost(
    theta: &ParamMatrix,
    loss: &DMatrix<f64>,
) -> Result<f64, PlannerError> {
    let n = loss.nrows();
    let d = loss.ncols();
    check_row_stochastic(theta)?;
    let size = (d as f64).powi(n as i32);
    if size > 1e6 {
        return Err(PlannerError::EnumerationTooLarge { size, limit: 1e6 });
    }
    let mut best = f64::INFINITY;
    let mut policy = vec![0usize; n];
    loop {
        let cost = eval_policy_avg_cost(theta, loss, &policy)?;
        best = best.min(cost);
        // Advance the policy as a base-d counter.
        let mut carry = true;
        for slot in policy.iter_mut() {
            if carry {
                *slot += 1;
                if *slot == d {
                    *slot = 0;
                } else {
                    carry = false;
                }
            }
        }
        if carry {
            return Ok(best);
        }
    }
}
