//! Numerical property suite: determinant lemmas, coupled-sampling
//! smoothness, conjugacy, posterior concentration, and planner
//! cross-oracle agreement. The `validate` CLI command runs these and the
//! acceptance tests assert them.

use crate::env::{
    coupled_next_states, random_unichain, web_server_instance, CoupledNext, CoupledQuery,
    CouplingNoise,
};
use crate::linalg::{weighted_param_norm, InfoMatrix};
use crate::planner::{brute_force_avg_cost, solve_acoe_tabular, solve_dare};
use crate::posterior::{concentration_stat, DirichletPosterior, GaussianPosterior};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;

/// Monte-Carlo draw count pinned by the concentration and coupling
/// contracts.
pub const MC_DRAWS: usize = 100_000;

/// Outcome of one named property check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn pass(name: &'static str, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(name: &'static str, witness: impl Into<String>) -> Self {
        Self {
            name,
            passed: false,
            detail: witness.into(),
        }
    }
}

/// Which family's suite to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckFamily {
    Tabular,
    Linear,
}

/// Runs `per_trial` for each trial index with a deterministic derived seed
/// and returns the first witness in trial order, if any. Parallel when the
/// feature is on; the result does not depend on the execution order.
fn first_witness<F>(trials: usize, seed: u64, per_trial: F) -> Option<String>
where
    F: Fn(usize, u64) -> Option<String> + Sync,
{
    let trial_seed = |i: usize| seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let results: Vec<Option<String>> = (0..trials)
            .into_par_iter()
            .map(|i| per_trial(i, trial_seed(i)))
            .collect();
        results.into_iter().flatten().next()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..trials).find_map(|i| per_trial(i, trial_seed(i)))
    }
}

fn random_psd(rng: &mut ChaCha12Rng, m: usize, ridge: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5);
    &g * g.transpose() + DMatrix::identity(m, m) * ridge
}

fn simplex_row(rng: &mut ChaCha12Rng, n: usize) -> DVector<f64> {
    let gamma = Gamma::new(1.0, 1.0).expect("unit gamma");
    let mut row = DVector::from_fn(n, |_, _| gamma.sample(rng));
    row /= row.sum();
    row
}

/// Log-det telescoping lemma: for PSD increments with `trace(M_t) ≤ L²`,
/// `Σ min(1, ‖V_t^{-1/2}‖²_{M_t}) ≤ 2(ln det V_{T+1} − ln det V)`
/// `≤ 2(m·ln((trace V + T·L²)/m) − ln det V)`.
pub fn logdet_telescoping(trials: usize, seed: u64) -> CheckReport {
    const NAME: &str = "logdet-telescoping";
    let horizon = 200;
    let witness = first_witness(trials, seed, |i, s| {
        let mut rng = ChaCha12Rng::seed_from_u64(s);
        let m = 2 + i % 4; // m in 2..=5
        let l2 = 1.0;
        let mut v = InfoMatrix::new(random_psd(&mut rng, m, 0.5)).expect("PD construction");
        let log_det_0 = v.log_det();
        let trace_0 = v.trace();
        let mut lhs = 0.0;
        for _ in 0..horizon {
            // Rank-one increment with trace at most L²: the spectral norm
            // ‖V^{-1/2} w u uᵀ V^{-1/2}‖₂ is exactly w·uᵀV⁻¹u.
            let mut u = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
            let norm = u.norm();
            if norm == 0.0 {
                continue;
            }
            u /= norm;
            let w = rng.random::<f64>() * l2;
            let quad = w * u.dot(&v.solve(&u));
            lhs += quad.min(1.0);
            v = v.updated(&[(w, u)]).expect("PSD update");
        }
        let mid = 2.0 * (v.log_det() - log_det_0);
        let rhs = 2.0
            * (m as f64 * ((trace_0 + horizon as f64 * l2) / m as f64).ln() - log_det_0);
        if lhs > mid + 1e-8 {
            return Some(format!(
                "trial {i} (m={m}): sum {lhs} exceeds 2·Δlogdet {mid}"
            ));
        }
        if mid > rhs + 1e-8 {
            return Some(format!(
                "trial {i} (m={m}): 2·Δlogdet {mid} exceeds trace bound {rhs}"
            ));
        }
        None
    });
    match witness {
        None => CheckReport::pass(NAME, format!("{trials} random sequences, T={horizon}")),
        Some(w) => CheckReport::fail(NAME, w),
    }
}

/// Determinant-ratio norm bound: for PSD `A ⪰ B ≻ 0` and `X ≠ 0`,
/// `‖XᵀAX‖₂ / ‖XᵀBX‖₂ ≤ det(A)/det(B)`.
pub fn det_ratio_bound(trials: usize, seed: u64) -> CheckReport {
    const NAME: &str = "det-ratio-bound";
    let witness = first_witness(trials, seed, |i, s| {
        let mut rng = ChaCha12Rng::seed_from_u64(s);
        let m = 2 + i % 4;
        let b = random_psd(&mut rng, m, 0.3);
        let a = &b + random_psd(&mut rng, m, 0.0);
        let k = 1 + i % 3;
        let x = DMatrix::from_fn(m, k, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let num = weighted_param_norm(&x, &a).expect("valid dims").powi(2);
        let den = weighted_param_norm(&x, &b).expect("valid dims").powi(2);
        let det_ratio = (InfoMatrix::new(a.clone()).expect("PD").log_det()
            - InfoMatrix::new(b.clone()).expect("PD").log_det())
        .exp();
        if num > det_ratio * den * (1.0 + 1e-8) + 1e-12 {
            return Some(format!(
                "trial {i} (m={m}): norm ratio {} exceeds det ratio {det_ratio}",
                num / den
            ));
        }
        None
    });
    match witness {
        None => CheckReport::pass(NAME, format!("{trials} random instances")),
        Some(w) => CheckReport::fail(NAME, w),
    }
}

/// Applying PSD increments in any order yields the same matrix.
pub fn psd_order_insensitivity(trials: usize, seed: u64) -> CheckReport {
    const NAME: &str = "psd-update-order";
    let witness = first_witness(trials, seed, |i, s| {
        let mut rng = ChaCha12Rng::seed_from_u64(s);
        let m = 2 + i % 4;
        let incs: Vec<(f64, DVector<f64>)> = (0..8)
            .map(|_| {
                (
                    rng.random::<f64>(),
                    DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5),
                )
            })
            .collect();
        let base = InfoMatrix::identity(m);
        let fwd = base.updated(&incs).expect("PSD update");
        let mut shuffled = incs.clone();
        // Deterministic Fisher-Yates driven by the trial stream.
        for j in (1..shuffled.len()).rev() {
            let k = rng.random_range(0..=j);
            shuffled.swap(j, k);
        }
        let bwd = base.updated(&shuffled).expect("PSD update");
        let diff = (fwd.dense() - bwd.dense()).norm();
        if diff > 1e-8 {
            return Some(format!("trial {i}: permutation changed V by {diff}"));
        }
        None
    });
    match witness {
        None => CheckReport::pass(NAME, format!("{trials} random permutations")),
        Some(w) => CheckReport::fail(NAME, w),
    }
}

/// Linear-family coupling: with shared noise,
/// `‖y − y'‖ = ‖Θ − Θ'‖_{φφᵀ}` holds exactly.
pub fn coupling_linear(trials: usize, seed: u64) -> CheckReport {
    const NAME: &str = "coupling-linear";
    let witness = first_witness(trials, seed, |i, s| {
        let mut rng = ChaCha12Rng::seed_from_u64(s);
        let n = 2 + i % 2;
        let d = 1 + i % 2;
        let m = n + d;
        let theta = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let theta_prime = DMatrix::from_fn(m, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let x = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let a = DVector::from_fn(d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let z = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let query = CoupledQuery::Linear {
            x: x.clone(),
            a: a.clone(),
            sigma: 0.7,
        };
        let noise = CouplingNoise::Linear { z };
        let (y, y_prime) = match coupled_next_states(&query, &theta, &theta_prime, &noise) {
            Ok(CoupledNext::Linear(y, y_prime)) => (y, y_prime),
            other => return Some(format!("trial {i}: unexpected result {other:?}")),
        };
        let phi = crate::env::feature_map_linear(&x, &a);
        let m_map = &phi * phi.transpose();
        let bound = weighted_param_norm(&(&theta - &theta_prime), &m_map).expect("valid dims");
        let dist = (y - y_prime).norm();
        if (dist - bound).abs() > 1e-8 * (1.0 + bound) {
            return Some(format!(
                "trial {i}: ‖y−y'‖ = {dist} but ‖Θ−Θ'‖_M = {bound}"
            ));
        }
        None
    });
    match witness {
        None => CheckReport::pass(NAME, format!("{trials} instances, exact equality")),
        Some(w) => CheckReport::fail(NAME, w),
    }
}

/// Tabular-family coupling on one explicit row pair: Monte-Carlo
/// `E‖y − y'‖` over independent draws must match the exact vertex-distance
/// computation `√2·(1 − θᵀθ')` within 2%. Exposed separately so tests can
/// inject corrupted rows.
pub fn coupling_tabular_witness(
    theta_row: &DVector<f64>,
    theta_prime_row: &DVector<f64>,
    draws: usize,
    seed: u64,
) -> Result<(), String> {
    let n = theta_row.len();
    if theta_prime_row.len() != n {
        return Err(format!(
            "row lengths differ: {n} vs {}",
            theta_prime_row.len()
        ));
    }
    for (label, row) in [("theta", theta_row), ("theta'", theta_prime_row)] {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
            return Err(format!(
                "{label} row is not a distribution (sum {sum}): {:?}",
                row.iter().collect::<Vec<_>>()
            ));
        }
    }
    // Embed the rows as the (x=0, a=0) slot of single-action matrices.
    let mut theta = DMatrix::zeros(n, n);
    let mut theta_prime = DMatrix::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            theta[(x, y)] = theta_row[y];
            theta_prime[(x, y)] = theta_prime_row[y];
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let query = CoupledQuery::Tabular { x: 0, a: 0, n };
    let mut acc = 0.0;
    for _ in 0..draws {
        let noise = CouplingNoise::Tabular {
            z: rng.random::<f64>(),
            z_prime: rng.random::<f64>(),
        };
        match coupled_next_states(&query, &theta, &theta_prime, &noise) {
            Ok(CoupledNext::Tabular(y, y_prime)) => {
                if y != y_prime {
                    acc += std::f64::consts::SQRT_2;
                }
            }
            Ok(other) => return Err(format!("unexpected family: {other:?}")),
            Err(e) => return Err(e.to_string()),
        }
    }
    let empirical = acc / draws as f64;
    let mismatch = 1.0 - theta_row.dot(theta_prime_row);
    let target = std::f64::consts::SQRT_2 * mismatch;
    // 2% relative, floored at four standard errors of the Bernoulli
    // estimator so high-overlap pairs are not judged inside Monte-Carlo
    // noise.
    let se = std::f64::consts::SQRT_2
        * (mismatch.clamp(0.0, 1.0) * (1.0 - mismatch.clamp(0.0, 1.0)) / draws as f64).sqrt();
    let tol = (0.02 * target).max(4.0 * se);
    if (empirical - target).abs() > tol {
        return Err(format!(
            "E‖y−y'‖ = {empirical} but √2(1−θᵀθ') = {target} (tolerance {tol})"
        ));
    }
    Ok(())
}

/// Tabular coupling over random row pairs.
pub fn coupling_tabular(trials: usize, seed: u64) -> CheckReport {
    const NAME: &str = "coupling-tabular";
    let witness = first_witness(trials, seed, |i, s| {
        let mut rng = ChaCha12Rng::seed_from_u64(s);
        let n = 2 + i % 4;
        let theta_row = simplex_row(&mut rng, n);
        let theta_prime_row = simplex_row(&mut rng, n);
        coupling_tabular_witness(&theta_row, &theta_prime_row, MC_DRAWS, s ^ 0xabcd)
            .err()
            .map(|e| format!("trial {i} (n={n}): {e}"))
    });
    match witness {
        None => CheckReport::pass(
            NAME,
            format!("{trials} row pairs at {MC_DRAWS} draws each"),
        ),
        Some(w) => CheckReport::fail(NAME, w),
    }
}

/// Dirichlet conjugacy: permuted observation batches produce identical
/// posteriors.
pub fn conjugacy_dirichlet(trials: usize, seed: u64) -> CheckReport {
    const NAME: &str = "conjugacy-dirichlet";
    let witness = first_witness(trials, seed, |i, s| {
        let mut rng = ChaCha12Rng::seed_from_u64(s);
        let n = 2 + i % 3;
        let d = 1 + i % 2;
        let alpha: Vec<f64> = (0..n).map(|_| 0.3 + rng.random::<f64>()).collect();
        let batch: Vec<(usize, usize, usize)> = (0..20)
            .map(|_| {
                (
                    rng.random_range(0..n),
                    rng.random_range(0..d),
                    rng.random_range(0..n),
                )
            })
            .collect();
        let mut fwd = DirichletPosterior::new(n, d, &alpha).expect("valid prior");
        let mut rev = fwd.clone();
        for &(x, a, y) in &batch {
            fwd.observe(x, a, y).expect("in range");
        }
        for &(x, a, y) in batch.iter().rev() {
            rev.observe(x, a, y).expect("in range");
        }
        if fwd != rev {
            return Some(format!("trial {i}: permuted batch changed the posterior"));
        }
        None
    });
    match witness {
        None => CheckReport::pass(NAME, format!("{trials} permuted batches, exact")),
        Some(w) => CheckReport::fail(NAME, w),
    }
}

/// Gaussian conjugacy: permuted observation batches agree to 1e-8.
pub fn conjugacy_gaussian(trials: usize, seed: u64) -> CheckReport {
    const NAME: &str = "conjugacy-gaussian";
    let witness = first_witness(trials, seed, |i, s| {
        let mut rng = ChaCha12Rng::seed_from_u64(s);
        let m = 2 + i % 3;
        let n = 1 + i % 2;
        let obs: Vec<(DVector<f64>, DVector<f64>)> = (0..15)
            .map(|_| {
                (
                    DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 - 1.0),
                    DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0),
                )
            })
            .collect();
        let mut fwd = GaussianPosterior::new(InfoMatrix::identity(m), n, None).expect("prior");
        let mut rev = fwd.clone();
        for (phi, y) in &obs {
            fwd.observe(phi, y).expect("dims match");
        }
        for (phi, y) in obs.iter().rev() {
            rev.observe(phi, y).expect("dims match");
        }
        let mean_diff = (fwd.mean() - rev.mean()).norm();
        let prec_diff = (fwd.precision().dense() - rev.precision().dense()).norm();
        if mean_diff > 1e-8 || prec_diff > 1e-8 {
            return Some(format!(
                "trial {i}: mean diff {mean_diff}, precision diff {prec_diff}"
            ));
        }
        None
    });
    match witness {
        None => CheckReport::pass(NAME, format!("{trials} permuted batches within 1e-8")),
        Some(w) => CheckReport::fail(NAME, w),
    }
}

/// Monte-Carlo posterior concentration for the Dirichlet family:
/// the average of `‖(Θ' − Θ̂)ᵀ V^{1/2}‖²` over posterior draws stays below
/// `n²·d` (5% slack for Monte-Carlo noise).
pub fn concentration_dirichlet(seed: u64) -> CheckReport {
    const NAME: &str = "concentration-dirichlet";
    let n = 3;
    let d = 2;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut post = DirichletPosterior::new(n, d, &[1.0; 3]).expect("valid prior");
    for _ in 0..30 {
        let x = rng.random_range(0..n);
        let a = rng.random_range(0..d);
        let y = rng.random_range(0..n);
        post.observe(x, a, y).expect("in range");
    }
    let v = post.implied_info_matrix();
    let mean = post.mean();
    let mut acc = 0.0;
    for _ in 0..MC_DRAWS {
        let draw = post.sample(&mut rng);
        acc += concentration_stat(&draw, &mean, &v).expect("dims match");
    }
    let avg = acc / MC_DRAWS as f64;
    let bound = (n * n * d) as f64;
    if avg <= bound * 1.05 {
        CheckReport::pass(
            NAME,
            format!("MC average {avg:.3} ≤ n²d = {bound} ({MC_DRAWS} draws)"),
        )
    } else {
        CheckReport::fail(
            NAME,
            format!("MC average {avg:.3} exceeds n²d = {bound}"),
        )
    }
}

/// Monte-Carlo posterior concentration for the Gaussian family: the same
/// statistic stays below `2·n·m³`.
pub fn concentration_gaussian(seed: u64) -> CheckReport {
    const NAME: &str = "concentration-gaussian";
    let m = 4;
    let n = 2;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut post = GaussianPosterior::new(InfoMatrix::identity(m), n, None).expect("prior");
    for _ in 0..20 {
        let phi = DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        post.observe(&phi, &y).expect("dims match");
    }
    let v = post.precision().clone();
    let mean = post.mean().clone();
    let mut acc = 0.0;
    for _ in 0..MC_DRAWS {
        let draw = post.sample(&mut rng);
        acc += concentration_stat(&draw, &mean, &v).expect("dims match");
    }
    let avg = acc / MC_DRAWS as f64;
    let bound = 2.0 * n as f64 * (m as f64).powi(3);
    if avg <= bound * 1.05 {
        CheckReport::pass(
            NAME,
            format!("MC average {avg:.3} ≤ 2nm³ = {bound} ({MC_DRAWS} draws)"),
        )
    } else {
        CheckReport::fail(NAME, format!("MC average {avg:.3} exceeds 2nm³ = {bound}"))
    }
}

/// Relative value iteration agrees with the brute-force policy enumeration
/// oracle to 1e-6 on random unichain instances.
pub fn acoe_cross_oracle(trials: usize, seed: u64) -> CheckReport {
    const NAME: &str = "acoe-cross-oracle";
    let witness = first_witness(trials, seed, |i, s| {
        let env = random_unichain(3, 2, s);
        let sol = match solve_acoe_tabular(&env.theta_star, &env.loss, 1e-9) {
            Ok(sol) => sol,
            Err(e) => return Some(format!("trial {i}: planner failed: {e}")),
        };
        let oracle = match brute_force_avg_cost(&env.theta_star, &env.loss) {
            Ok(j) => j,
            Err(e) => return Some(format!("trial {i}: oracle failed: {e}")),
        };
        if (sol.avg_cost - oracle).abs() > 1e-6 {
            return Some(format!(
                "trial {i}: J_acoe = {} vs J_brute = {oracle}",
                sol.avg_cost
            ));
        }
        None
    });
    match witness {
        None => CheckReport::pass(NAME, format!("{trials} instances within 1e-6")),
        Some(w) => CheckReport::fail(NAME, w),
    }
}

/// Riccati solver sanity: scalar closed form, the web-server instance, and
/// random stabilizable systems with stable closed loops.
pub fn dare_properties(trials: usize, seed: u64) -> CheckReport {
    const NAME: &str = "dare-properties";
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    let one = DMatrix::from_row_slice(1, 1, &[1.0]);
    match solve_dare(&one, &one, &one, &one, 1e-13, 100_000) {
        Ok(sol) => {
            if (sol.p[(0, 0)] - golden).abs() > 1e-10 {
                return CheckReport::fail(
                    NAME,
                    format!("scalar DARE {} vs (1+√5)/2 = {golden}", sol.p[(0, 0)]),
                );
            }
        }
        Err(e) => return CheckReport::fail(NAME, format!("scalar DARE failed: {e}")),
    }
    let env = web_server_instance(0.1).expect("valid sigma");
    match solve_dare(&env.a, &env.b, &env.q, &env.r, 1e-12, 100_000) {
        Ok(sol) => {
            if sol.dare_residual > 1e-9 {
                return CheckReport::fail(
                    NAME,
                    format!("web-server residual {}", sol.dare_residual),
                );
            }
            let rho = (&env.a - &env.b * &sol.k)
                .complex_eigenvalues()
                .iter()
                .map(|e| e.norm())
                .fold(0.0f64, f64::max);
            if rho >= 1.0 {
                return CheckReport::fail(NAME, format!("web-server closed loop ρ = {rho}"));
            }
        }
        Err(e) => return CheckReport::fail(NAME, format!("web-server DARE failed: {e}")),
    }
    let witness = first_witness(trials, seed, |i, s| {
        let mut rng = ChaCha12Rng::seed_from_u64(s);
        let n = 2;
        let d = 2;
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        // Scale to spectral radius 0.9 so the pair is stabilizable.
        let rho = a
            .complex_eigenvalues()
            .iter()
            .map(|e| e.norm())
            .fold(0.0f64, f64::max);
        if rho > 0.0 {
            a *= 0.9 / rho.max(0.9);
        }
        let b = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let q = random_psd(&mut ChaCha12Rng::seed_from_u64(s ^ 1), n, 0.1);
        let r = random_psd(&mut ChaCha12Rng::seed_from_u64(s ^ 2), d, 0.1);
        match solve_dare(&a, &b, &q, &r, 1e-12, 100_000) {
            Ok(sol) => {
                let rho = (&a - &b * &sol.k)
                    .complex_eigenvalues()
                    .iter()
                    .map(|e| e.norm())
                    .fold(0.0f64, f64::max);
                if rho >= 1.0 {
                    return Some(format!("trial {i}: closed loop ρ = {rho}"));
                }
                None
            }
            Err(e) => Some(format!("trial {i}: {e}")),
        }
    });
    match witness {
        None => CheckReport::pass(NAME, format!("scalar + web-server + {trials} random systems")),
        Some(w) => CheckReport::fail(NAME, w),
    }
}

/// The per-family suites behind the `validate` command.
pub fn run_family_checks(family: CheckFamily, trials: usize, seed: u64) -> Vec<CheckReport> {
    let mut reports = vec![
        logdet_telescoping(trials, seed),
        det_ratio_bound(trials, seed.wrapping_add(1)),
        psd_order_insensitivity(trials, seed.wrapping_add(2)),
    ];
    match family {
        CheckFamily::Tabular => {
            reports.push(coupling_tabular(trials, seed.wrapping_add(3)));
            reports.push(conjugacy_dirichlet(trials, seed.wrapping_add(4)));
            reports.push(concentration_dirichlet(seed.wrapping_add(5)));
            reports.push(acoe_cross_oracle(trials, seed.wrapping_add(6)));
        }
        CheckFamily::Linear => {
            reports.push(coupling_linear(trials, seed.wrapping_add(3)));
            reports.push(conjugacy_gaussian(trials, seed.wrapping_add(4)));
            reports.push(concentration_gaussian(seed.wrapping_add(5)));
            reports.push(dare_properties(trials, seed.wrapping_add(6)));
        }
    }
    reports
}
