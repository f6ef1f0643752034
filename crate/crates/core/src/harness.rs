//! Regret measurement and experiment orchestration.
//!
//! [`run_episode`] simulates one seeded trajectory of an agent against the
//! true environment and books regret against the optimal average cost
//! `J(Θ*)`. [`run_experiment`] fans episodes out across seeds (rayon when
//! the `parallel` feature is on, with a sequential path that produces
//! identical results) and aggregates mean/std regret curves.

use crate::agent::{
    ActOutcome, AgentError, ControlFamily, LazyPsrl, LinearFamily, PlanSource, SafeRegion,
    TabularFamily,
};
use crate::config::{resolve_env, AgentKind, ConfigError, ExperimentConfig, InitialState};
use crate::env::{
    clip_action, linear_step, quadratic_loss, tabular_step, EnvModel, LinearEnv, TabularEnv,
};
use crate::linalg::InfoMatrix;
use crate::planner::{
    greedy_action_tabular, lq_action, solve_acoe_tabular, solve_dare, PlannerError,
};
use crate::posterior::{DirichletPosterior, GaussianPosterior};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use thiserror::Error;

/// Tolerance used to compute `J(Θ*)` on tabular instances.
const J_STAR_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("episode with seed {seed} failed: {source}")]
    Episode {
        seed: u64,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("planner failed on the true parameters (ill-posed experiment): {0}")]
    IllPosed(PlannerError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("initial state does not fit the environment: {0}")]
    BadInitialState(String),
    #[error("prior does not fit the environment: {0}")]
    BadPrior(String),
    #[error("agent `{agent}` is not available for this environment family")]
    UnsupportedAgent { agent: AgentKind },
}

/// Serializable state/action payload for trajectory logs: an index for the
/// tabular family, a vector for the linear family.
#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(untagged)]
pub enum StateRepr {
    Discrete(usize),
    Vector(Vec<f64>),
}

/// One trajectory record, streamed as a JSON line.
#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub t: usize,
    pub x: StateRepr,
    pub a: StateRepr,
    pub x_next: StateRepr,
    pub loss: f64,
    pub resampled: bool,
    pub log_det: f64,
}

/// Per-episode regret bookkeeping plus the monitor inputs.
#[derive(Debug, Clone)]
pub struct RegretRecord {
    pub seed: u64,
    pub j_star: f64,
    pub losses: Vec<f64>,
    /// Running `Σ (ℓ_t − J*)`; the increment identity is exact.
    pub cum_regret: Vec<f64>,
    pub resample_times: Vec<usize>,
    /// Posterior concentration diagnostic at each resample, aligned with
    /// `resample_times` for posterior-based agents (empty otherwise).
    pub resample_concentrations: Vec<f64>,
    pub clip_events: Vec<usize>,
    /// Total planner suboptimality Σ σ_t accumulated by the agent.
    pub sigma_total: f64,
    /// ln det(V) before any observation, and the matrix dimension m.
    pub log_det_start: f64,
    pub info_dim: usize,
    pub info_trace_start: f64,
    /// Per-step traces of the information increment and the smoothness map.
    pub info_traces: Vec<f64>,
    pub smooth_traces: Vec<f64>,
    /// ln det(V_t) after each step.
    pub log_dets: Vec<f64>,
    pub outside_region: Vec<bool>,
    pub has_region: bool,
    pub steps: Vec<StepLog>,
}

impl RegretRecord {
    pub fn final_regret(&self) -> f64 {
        *self.cum_regret.last().unwrap_or(&0.0)
    }

    pub fn trajectory_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).expect("step serializes"));
            out.push('\n');
        }
        out
    }
}

/// Mean/std cumulative regret across seeds, with provenance.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub mean_regret: Vec<f64>,
    pub std_regret: Vec<f64>,
    pub fingerprint: String,
    pub wall_time_s: f64,
    pub records: Vec<RegretRecord>,
}

impl ExperimentResult {
    /// `regret.csv` bytes: a provenance comment, a `t,mean,std` header, one
    /// row per step. Deterministic for a fixed config.
    pub fn regret_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# config_fingerprint={}\n", self.fingerprint));
        out.push_str("t,mean,std\n");
        for (i, (m, s)) in self.mean_regret.iter().zip(&self.std_regret).enumerate() {
            out.push_str(&format!("{},{},{}\n", i + 1, m, s));
        }
        out
    }
}

/// Result of the sublinearity diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum SlopeFit {
    Slope(f64),
    /// The mean regret was nonpositive somewhere in the window.
    BelowNoiseFloor,
}

/// OLS slope of `ln(mean cumulative regret)` against `ln t` over the
/// 1-based step window `[t_lo, t_hi]`.
pub fn fit_regret_exponent(mean_regret: &[f64], t_lo: usize, t_hi: usize) -> SlopeFit {
    let t_lo = t_lo.max(1);
    let t_hi = t_hi.min(mean_regret.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in t_lo..=t_hi {
        let r = mean_regret[t - 1];
        if r <= 0.0 {
            return SlopeFit::BelowNoiseFloor;
        }
        xs.push((t as f64).ln());
        ys.push(r.ln());
    }
    if xs.len() < 2 {
        return SlopeFit::BelowNoiseFloor;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    SlopeFit::Slope(num / den)
}

/// Slope over the default burn-in-discarding window `[T/2, T]`.
pub fn fit_default_window(result: &ExperimentResult) -> SlopeFit {
    let t = result.mean_regret.len();
    fit_regret_exponent(&result.mean_regret, t / 2, t)
}

/// Boundedness and switching diagnostics over one episode log.
#[derive(Debug, Clone, Serialize)]
pub struct MonitorReport {
    /// Max/mean trace of the smoothness map M(x, a) along the run.
    pub max_smooth_trace: f64,
    pub mean_smooth_trace: f64,
    /// Largest trace among the increments actually added to V_t.
    pub max_info_trace: f64,
    /// Total parameter draws, including the forced initial draw.
    pub resample_count: usize,
    /// Determinant-triggered switches K: the forced initial draw precedes
    /// any data (determinant ratio 1) and is excluded, so every counted
    /// switch certifies a doubling.
    pub switch_count: usize,
    /// `m·log₂(trace(V) + Φ̂²·T)` with `Φ̂²` the observed max info trace.
    pub switch_bound: f64,
    pub switch_bound_holds: bool,
    /// `2^K ≤ det(V_T)/det(V)` checked in log space.
    pub det_doubling_holds: bool,
    pub outside_region_fraction: Option<f64>,
}

/// Computes the monitor report from a finished episode.
pub fn assumption_monitors(record: &RegretRecord) -> MonitorReport {
    let t = record.losses.len();
    let max_smooth = record.smooth_traces.iter().cloned().fold(0.0, f64::max);
    let mean_smooth = if t == 0 {
        0.0
    } else {
        record.smooth_traces.iter().sum::<f64>() / t as f64
    };
    let max_info = record.info_traces.iter().cloned().fold(0.0, f64::max);
    let resample_count = record.resample_times.len();
    // A resample at t = 1 is the forced initial draw; determinant-triggered
    // switches can only happen once V_t has moved.
    let k = record.resample_times.iter().filter(|&&s| s > 1).count();
    let switch_bound = record.info_dim as f64
        * (record.info_trace_start + max_info * t as f64).log2();
    let log_det_final = record.log_dets.last().copied().unwrap_or(record.log_det_start);
    let det_doubling_holds =
        k as f64 * 2.0f64.ln() <= log_det_final - record.log_det_start + 1e-9;
    MonitorReport {
        max_smooth_trace: max_smooth,
        mean_smooth_trace: mean_smooth,
        max_info_trace: max_info,
        resample_count,
        switch_count: k,
        switch_bound,
        switch_bound_holds: (k as f64) <= switch_bound + 1e-9,
        det_doubling_holds,
        outside_region_fraction: if record.has_region {
            Some(record.outside_region.iter().filter(|&&b| b).count() as f64 / t.max(1) as f64)
        } else {
            None
        },
    }
}

/// JSON summary written next to `regret.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config_fingerprint: String,
    pub env: String,
    pub agent: AgentKind,
    pub t: usize,
    pub seeds: Vec<u64>,
    pub final_mean_regret: f64,
    pub final_std_regret: f64,
    pub slope: SlopeFit,
    pub switch_counts: Vec<usize>,
    pub switch_bound_holds: bool,
    pub det_doubling_holds: bool,
    pub sigma_totals: Vec<f64>,
    pub wall_time_s: f64,
}

pub fn summarize(config: &ExperimentConfig, result: &ExperimentResult) -> Summary {
    let monitors: Vec<MonitorReport> = result.records.iter().map(assumption_monitors).collect();
    Summary {
        config_fingerprint: result.fingerprint.clone(),
        env: config.env.clone(),
        agent: config.agent,
        t: config.t,
        seeds: config.seeds.clone(),
        final_mean_regret: *result.mean_regret.last().unwrap_or(&0.0),
        final_std_regret: *result.std_regret.last().unwrap_or(&0.0),
        slope: fit_default_window(result),
        switch_counts: monitors.iter().map(|m| m.switch_count).collect(),
        switch_bound_holds: monitors.iter().all(|m| m.switch_bound_holds),
        det_doubling_holds: monitors.iter().all(|m| m.det_doubling_holds),
        sigma_totals: result.records.iter().map(|r| r.sigma_total).collect(),
        wall_time_s: result.wall_time_s,
    }
}

/// Execution strategy for the seed loop. `Parallel` silently degrades to
/// the sequential path when the `parallel` feature is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

struct EpisodeAccumulator {
    j_star: f64,
    seed: u64,
    losses: Vec<f64>,
    cum_regret: Vec<f64>,
    clip_events: Vec<usize>,
    info_traces: Vec<f64>,
    smooth_traces: Vec<f64>,
    log_dets: Vec<f64>,
    outside_region: Vec<bool>,
    steps: Vec<StepLog>,
}

impl EpisodeAccumulator {
    fn new(j_star: f64, seed: u64, t: usize) -> Self {
        Self {
            j_star,
            seed,
            losses: Vec::with_capacity(t),
            cum_regret: Vec::with_capacity(t),
            clip_events: Vec::new(),
            info_traces: Vec::with_capacity(t),
            smooth_traces: Vec::with_capacity(t),
            log_dets: Vec::with_capacity(t),
            outside_region: Vec::with_capacity(t),
            steps: Vec::with_capacity(t),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        t: usize,
        x: StateRepr,
        a: StateRepr,
        x_next: StateRepr,
        loss: f64,
        resampled: bool,
        log_det: f64,
        info_trace: f64,
        smooth_trace: f64,
        outside: bool,
        clipped: bool,
    ) {
        let prev = self.cum_regret.last().copied().unwrap_or(0.0);
        self.losses.push(loss);
        self.cum_regret.push(prev + loss - self.j_star);
        self.info_traces.push(info_trace);
        self.smooth_traces.push(smooth_trace);
        self.log_dets.push(log_det);
        self.outside_region.push(outside);
        if clipped {
            self.clip_events.push(t);
        }
        self.steps.push(StepLog {
            t,
            x,
            a,
            x_next,
            loss,
            resampled,
            log_det,
        });
    }

    fn finish(
        self,
        resample_times: Vec<usize>,
        resample_concentrations: Vec<f64>,
        sigma_total: f64,
        log_det_start: f64,
        info_dim: usize,
        info_trace_start: f64,
        has_region: bool,
    ) -> RegretRecord {
        RegretRecord {
            seed: self.seed,
            j_star: self.j_star,
            losses: self.losses,
            cum_regret: self.cum_regret,
            resample_times,
            resample_concentrations,
            clip_events: self.clip_events,
            sigma_total,
            log_det_start,
            info_dim,
            info_trace_start,
            info_traces: self.info_traces,
            smooth_traces: self.smooth_traces,
            log_dets: self.log_dets,
            outside_region: self.outside_region,
            has_region,
            steps: self.steps,
        }
    }
}

/// Simulates one seeded episode.
pub fn run_episode(
    env: &EnvModel,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<RegretRecord, HarnessError> {
    match env {
        EnvModel::Tabular(env) => run_tabular_episode(env, config, seed),
        EnvModel::Linear(env) => run_linear_episode(env, config, seed),
    }
}

fn initial_tabular_state(
    config: &ExperimentConfig,
    n: usize,
) -> Result<usize, HarnessError> {
    match &config.initial_state {
        None => Ok(0),
        Some(InitialState::Index(i)) if *i < n => Ok(*i),
        Some(InitialState::Index(i)) => Err(HarnessError::BadInitialState(format!(
            "state index {i} out of range for {n} states"
        ))),
        Some(InitialState::Vector(_)) => Err(HarnessError::BadInitialState(
            "tabular environments take a state index".into(),
        )),
    }
}

fn initial_linear_state(
    config: &ExperimentConfig,
    n: usize,
) -> Result<DVector<f64>, HarnessError> {
    match &config.initial_state {
        None => Ok(DVector::zeros(n)),
        Some(InitialState::Vector(v)) if v.len() == n => Ok(DVector::from_row_slice(v)),
        Some(InitialState::Vector(v)) => Err(HarnessError::BadInitialState(format!(
            "initial vector has length {}, state dimension is {n}",
            v.len()
        ))),
        Some(InitialState::Index(_)) => Err(HarnessError::BadInitialState(
            "linear environments take a state vector".into(),
        )),
    }
}

fn run_tabular_episode(
    env: &TabularEnv,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<RegretRecord, HarnessError> {
    let n = env.n;
    let d = env.d;
    let star =
        solve_acoe_tabular(&env.theta_star, &env.loss, J_STAR_EPS).map_err(HarnessError::IllPosed)?;
    let j_star = star.avg_cost;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x = initial_tabular_state(config, n)?;

    let alpha = config
        .prior
        .alpha
        .clone()
        .unwrap_or_else(|| vec![1.0; n]);
    if alpha.len() != n {
        return Err(HarnessError::BadPrior(format!(
            "prior.alpha has length {}, state count is {n}",
            alpha.len()
        )));
    }
    let make_family = || -> Result<TabularFamily, HarnessError> {
        let posterior = DirichletPosterior::new(n, d, &alpha).map_err(AgentError::from)?;
        Ok(TabularFamily::new(
            posterior,
            env.loss.clone(),
            config.planner.eps_span,
        ))
    };

    #[allow(clippy::large_enum_variant)]
    enum Runner {
        Psrl(LazyPsrl<TabularFamily>),
        Oracle(crate::planner::AcoeSolution),
        Random,
    }

    let mut runner = match config.agent {
        AgentKind::LazyPsrl => {
            let family = make_family()?;
            let v = family.prior_info_matrix();
            Runner::Psrl(
                LazyPsrl::with_resample_factor(
                    family,
                    v,
                    PlanSource::PosteriorSample,
                    config.resample_factor,
                )
                .map_err(HarnessError::Agent)?,
            )
        }
        AgentKind::CertaintyEquivalence => {
            let family = make_family()?;
            let v = family.prior_info_matrix();
            Runner::Psrl(
                LazyPsrl::with_resample_factor(
                    family,
                    v,
                    PlanSource::PosteriorMean,
                    config.resample_factor,
                )
                .map_err(HarnessError::Agent)?,
            )
        }
        AgentKind::Oracle => Runner::Oracle(star.clone()),
        AgentKind::Random => Runner::Random,
        AgentKind::StabilizedLazyPsrl => {
            return Err(HarnessError::UnsupportedAgent {
                agent: config.agent,
            });
        }
    };

    // Trajectory-defined information matrix for agents that do not keep one.
    let family_for_tracking = make_family()?;
    let mut v_track = family_for_tracking.prior_info_matrix();
    let log_det_start = v_track.log_det();
    let info_dim = v_track.dim();
    let info_trace_start = v_track.trace();

    let mut acc = EpisodeAccumulator::new(j_star, seed, config.t);
    let mut oracle_sigma_total = 0.0;
    for t in 1..=config.t {
        let (action, resampled) = match &mut runner {
            Runner::Psrl(agent) => {
                let out = agent.act(&x, &mut rng).map_err(HarnessError::Agent)?;
                (out.action, out.resampled)
            }
            Runner::Oracle(plan) => {
                oracle_sigma_total += plan.sigma;
                (
                    greedy_action_tabular(plan, &env.theta_star, &env.loss, x)
                        .map_err(HarnessError::IllPosed)?,
                    t == 1,
                )
            }
            Runner::Random => (rng.random_range(0..d), false),
        };
        let z = rng.random::<f64>();
        let x_next = tabular_step(env, x, action, z)?;
        let loss = env.loss[(x, action)];

        let (log_det, info_trace, smooth_trace) = match &mut runner {
            Runner::Psrl(agent) => {
                let info = agent.observe(&x, &action, &x_next).map_err(HarnessError::Agent)?;
                (info.log_det, info.info_trace, info.smooth_trace)
            }
            _ => {
                let incs = family_for_tracking.info_increment(&x, &action);
                let info_trace = incs.iter().map(|(w, v)| w * v.norm_squared()).sum();
                v_track = v_track.updated(&incs).map_err(AgentError::from)?;
                (
                    v_track.log_det(),
                    info_trace,
                    family_for_tracking.smooth_trace(&x, &action),
                )
            }
        };

        acc.push(
            t,
            StateRepr::Discrete(x),
            StateRepr::Discrete(action),
            StateRepr::Discrete(x_next),
            loss,
            resampled,
            log_det,
            info_trace,
            smooth_trace,
            false,
            false,
        );
        x = x_next;
    }

    let (resample_times, concentrations, sigma_total) = match &runner {
        Runner::Psrl(agent) => (
            agent.resample_times().to_vec(),
            agent.resample_concentrations().to_vec(),
            agent.sigma_total(),
        ),
        Runner::Oracle(_) => (vec![1], Vec::new(), oracle_sigma_total),
        Runner::Random => (Vec::new(), Vec::new(), 0.0),
    };
    Ok(acc.finish(
        resample_times,
        concentrations,
        sigma_total,
        log_det_start,
        info_dim,
        info_trace_start,
        false,
    ))
}

fn stabilizer_gain(
    env: &LinearEnv,
    config: &ExperimentConfig,
) -> Result<DMatrix<f64>, HarnessError> {
    let n = env.state_dim();
    let d = env.action_dim();
    if let Some(rows) = &config.stabilizer_gain {
        if rows.len() != d || rows.iter().any(|r| r.len() != n) {
            return Err(HarnessError::BadPrior(format!(
                "stabilizer_gain must be {d}x{n}"
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        return Ok(DMatrix::from_row_slice(d, n, &flat));
    }
    // Default: gain from the prior mean dynamics with the more aggressive
    // cost R/10.
    let zero_a = DMatrix::zeros(n, n);
    let zero_b = DMatrix::zeros(n, d);
    let sol = solve_dare(
        &zero_a,
        &zero_b,
        &env.q,
        &(&env.r / 10.0),
        config.planner.dare_tol,
        config.planner.dare_max_iter,
    )
    .map_err(HarnessError::IllPosed)?;
    Ok(sol.k)
}

fn run_linear_episode(
    env: &LinearEnv,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<RegretRecord, HarnessError> {
    let n = env.state_dim();
    let d = env.action_dim();
    let star = solve_dare(
        &env.a,
        &env.b,
        &env.q,
        &env.r,
        config.planner.dare_tol,
        config.planner.dare_max_iter,
    )
    .map_err(HarnessError::IllPosed)?;
    let j_star = star.avg_cost(env.sigma);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x = initial_linear_state(config, n)?;

    let m = n + d;
    let lambda = config.prior.lambda;
    let make_family = || -> Result<LinearFamily, HarnessError> {
        // Prior covariance λ²I per column means precision (1/λ²)·I.
        let precision = InfoMatrix::from_diagonal(&vec![1.0 / (lambda * lambda); m])
            .map_err(AgentError::from)?;
        let posterior = GaussianPosterior::new(precision, n, None).map_err(AgentError::from)?;
        Ok(LinearFamily {
            posterior,
            q: env.q.clone(),
            r: env.r.clone(),
            noise_std: env.sigma,
            dare_tol: config.planner.dare_tol,
            dare_max_iter: config.planner.dare_max_iter,
        })
    };

    #[allow(clippy::large_enum_variant)]
    enum Runner {
        Psrl(LazyPsrl<LinearFamily>),
        Stabilized(LazyPsrl<LinearFamily>, SafeRegion, DMatrix<f64>),
        Oracle(crate::planner::LqSolution),
        Random,
    }

    let source = if config.agent == AgentKind::CertaintyEquivalence {
        PlanSource::PosteriorMean
    } else {
        PlanSource::PosteriorSample
    };
    let make_agent = |family: LinearFamily| {
        let v = family.posterior.precision().clone();
        LazyPsrl::with_resample_factor(family, v, source, config.resample_factor)
            .map_err(HarnessError::Agent)
    };

    let mut runner = match config.agent {
        AgentKind::LazyPsrl | AgentKind::CertaintyEquivalence => {
            Runner::Psrl(make_agent(make_family()?)?)
        }
        AgentKind::StabilizedLazyPsrl => {
            let region = config
                .safe_region
                .clone()
                .ok_or_else(|| ConfigError::new("safe_region", "required"))?;
            let gain = stabilizer_gain(env, config)?;
            Runner::Stabilized(make_agent(make_family()?)?, region, gain)
        }
        AgentKind::Oracle => Runner::Oracle(star.clone()),
        AgentKind::Random => Runner::Random,
    };
    let has_region = matches!(runner, Runner::Stabilized(..));

    let family_for_tracking = make_family()?;
    let mut v_track = family_for_tracking.posterior.precision().clone();
    let log_det_start = v_track.log_det();
    let info_dim = v_track.dim();
    let info_trace_start = v_track.trace();

    let mut acc = EpisodeAccumulator::new(j_star, seed, config.t);
    let mut oracle_sigma_total = 0.0;
    for t in 1..=config.t {
        let (raw_action, resampled, overridden) = match &mut runner {
            Runner::Psrl(agent) => {
                let ActOutcome {
                    action, resampled, ..
                } = agent.act(&x, &mut rng).map_err(HarnessError::Agent)?;
                (action, resampled, false)
            }
            Runner::Stabilized(agent, region, gain) => {
                let out = agent
                    .stabilized_act(region, |x| -(&*gain * x), &x, &mut rng)
                    .map_err(HarnessError::Agent)?;
                (out.action, out.resampled, out.overridden)
            }
            Runner::Oracle(plan) => {
                oracle_sigma_total += plan.dare_residual;
                (
                    lq_action(plan, &x).map_err(HarnessError::IllPosed)?,
                    t == 1,
                    false,
                )
            }
            Runner::Random => (
                DVector::from_fn(d, |_, _| rng.sample(rand_distr::StandardNormal)),
                false,
                false,
            ),
        };
        // Clip before execution; the posterior learns from the executed
        // action.
        let (action, clipped) = clip_action(env, &raw_action);
        let z = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let (x_next, _) = linear_step(env, &x, &action, &z)?;
        let loss = quadratic_loss(&x, &action, &env.q, &env.r)?;

        let (log_det, info_trace, smooth_trace) = match &mut runner {
            Runner::Psrl(agent) | Runner::Stabilized(agent, _, _) => {
                let info = agent
                    .observe(&x, &action, &x_next)
                    .map_err(HarnessError::Agent)?;
                (info.log_det, info.info_trace, info.smooth_trace)
            }
            _ => {
                let incs = family_for_tracking.info_increment(&x, &action);
                let info_trace = incs.iter().map(|(w, v)| w * v.norm_squared()).sum();
                v_track = v_track.updated(&incs).map_err(AgentError::from)?;
                (
                    v_track.log_det(),
                    info_trace,
                    family_for_tracking.smooth_trace(&x, &action),
                )
            }
        };

        acc.push(
            t,
            StateRepr::Vector(x.iter().copied().collect()),
            StateRepr::Vector(action.iter().copied().collect()),
            StateRepr::Vector(x_next.iter().copied().collect()),
            loss,
            resampled,
            log_det,
            info_trace,
            smooth_trace,
            overridden,
            clipped,
        );
        x = x_next;
    }

    let (resample_times, concentrations, sigma_total) = match &runner {
        Runner::Psrl(agent) | Runner::Stabilized(agent, _, _) => (
            agent.resample_times().to_vec(),
            agent.resample_concentrations().to_vec(),
            agent.sigma_total(),
        ),
        Runner::Oracle(_) => (vec![1], Vec::new(), oracle_sigma_total),
        Runner::Random => (Vec::new(), Vec::new(), 0.0),
    };
    Ok(acc.finish(
        resample_times,
        concentrations,
        sigma_total,
        log_det_start,
        info_dim,
        info_trace_start,
        has_region,
    ))
}

fn aggregate(
    config: &ExperimentConfig,
    records: Vec<RegretRecord>,
    wall_time_s: f64,
) -> ExperimentResult {
    let t = config.t;
    let k = records.len() as f64;
    let mut mean = vec![0.0; t];
    let mut std = vec![0.0; t];
    for rec in &records {
        for (i, r) in rec.cum_regret.iter().enumerate() {
            mean[i] += r;
        }
    }
    for m in &mut mean {
        *m /= k;
    }
    // Population standard deviation: a single seed yields exactly zero.
    for rec in &records {
        for (i, r) in rec.cum_regret.iter().enumerate() {
            let dev = r - mean[i];
            std[i] += dev * dev;
        }
    }
    for s in &mut std {
        *s = (*s / k).sqrt();
    }
    ExperimentResult {
        mean_regret: mean,
        std_regret: std,
        fingerprint: config.fingerprint(),
        wall_time_s,
        records,
    }
}

/// Runs every seed and aggregates. Seed order is preserved regardless of
/// the execution mode, so both modes produce identical results.
pub fn run_experiment_with_mode(
    config: &ExperimentConfig,
    mode: ExecMode,
) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let env = resolve_env(config)?;
    let start = std::time::Instant::now();
    let run_one = |seed: &u64| {
        run_episode(&env, config, *seed).map_err(|e| HarnessError::Episode {
            seed: *seed,
            source: Box::new(e),
        })
    };
    let records: Result<Vec<RegretRecord>, HarnessError> = match mode {
        ExecMode::Sequential => config.seeds.iter().map(run_one).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                config.seeds.par_iter().map(run_one).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                config.seeds.iter().map(run_one).collect()
            }
        }
    };
    let records = records?;
    let wall_time_s = start.elapsed().as_secs_f64();
    Ok(aggregate(config, records, wall_time_s))
}

/// Seed-parallel experiment (the default execution mode).
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    run_experiment_with_mode(config, ExecMode::Parallel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{PlannerTolerances, PriorSpec};

    fn tabular_config(agent: AgentKind, t: usize, seeds: Vec<u64>) -> ExperimentConfig {
        ExperimentConfig {
            env: "random-tabular".into(),
            env_params: Some(crate::config::RandomTabularParams {
                n: 3,
                d: 2,
                gen_seed: 0,
            }),
            agent,
            t,
            seeds,
            prior: PriorSpec::default(),
            planner: PlannerTolerances::default(),
            resample_factor: 2.0,
            safe_region: None,
            stabilizer_gain: None,
            initial_state: None,
            sigma_override: None,
            out_dir: None,
        }
    }

    fn webserver_config(agent: AgentKind, t: usize, seeds: Vec<u64>) -> ExperimentConfig {
        ExperimentConfig {
            env: "webserver-0.1".into(),
            env_params: None,
            agent,
            t,
            seeds,
            prior: PriorSpec::default(),
            planner: PlannerTolerances::default(),
            resample_factor: 2.0,
            safe_region: None,
            stabilizer_gain: None,
            initial_state: None,
            sigma_override: None,
            out_dir: None,
        }
    }

    #[test]
    fn regret_identity_is_exact() {
        let cfg = tabular_config(AgentKind::LazyPsrl, 200, vec![5]);
        let env = resolve_env(&cfg).unwrap();
        let rec = run_episode(&env, &cfg, 5).unwrap();
        assert_eq!(rec.losses.len(), 200);
        let mut prev = 0.0;
        for (l, c) in rec.losses.iter().zip(&rec.cum_regret) {
            assert_eq!(*c, prev + l - rec.j_star);
            prev = *c;
        }
    }

    #[test]
    fn oracle_agent_has_near_zero_regret() {
        let seeds: Vec<u64> = (0..50).collect();
        let cfg = tabular_config(AgentKind::Oracle, 2000, seeds);
        let result = run_experiment_with_mode(&cfg, ExecMode::Sequential).unwrap();
        let final_mean = *result.mean_regret.last().unwrap();
        let final_std = *result.std_regret.last().unwrap();
        let stderr = final_std / (result.records.len() as f64).sqrt();
        assert!(
            final_mean.abs() <= 3.0 * stderr.max(1e-9),
            "oracle mean regret {final_mean} exceeds 3 standard errors {stderr}"
        );
    }

    #[test]
    fn random_agent_regret_grows_linearly() {
        let cfg = tabular_config(AgentKind::Random, 4000, (0..10).collect());
        let result = run_experiment_with_mode(&cfg, ExecMode::Sequential).unwrap();
        match fit_default_window(&result) {
            SlopeFit::Slope(s) => assert!(s > 0.9, "random-policy slope {s}"),
            SlopeFit::BelowNoiseFloor => panic!("random policy should accrue regret"),
        }
        // Slope of the raw regret matches the policy-evaluation gap.
        let env = resolve_env(&cfg).unwrap();
        let (theta, loss) = match &env {
            EnvModel::Tabular(e) => (e.theta_star.clone(), e.loss.clone()),
            _ => unreachable!(),
        };
        // Uniform-mix chain and loss.
        let n = 3;
        let d = 2;
        let mut chain = nalgebra::DMatrix::<f64>::zeros(n, n);
        let mut avg_loss = nalgebra::DVector::<f64>::zeros(n);
        for x in 0..n {
            for a in 0..d {
                for y in 0..n {
                    chain[(x, y)] += theta[(a * n + x, y)] / d as f64;
                }
                avg_loss[x] += loss[(x, a)] / d as f64;
            }
        }
        let mu = crate::planner::stationary_distribution(&chain).unwrap();
        let j_random: f64 = (0..n).map(|x| mu[x] * avg_loss[x]).sum();
        let j_star = result.records[0].j_star;
        let expected_slope = j_random - j_star;
        assert!(expected_slope > 0.0);
        let t = cfg.t as f64;
        let empirical_slope = *result.mean_regret.last().unwrap() / t;
        assert!(
            (empirical_slope - expected_slope).abs() < 0.3 * expected_slope,
            "empirical {empirical_slope} vs expected {expected_slope}"
        );
    }

    #[test]
    fn webserver_episode_structure() {
        let cfg = webserver_config(AgentKind::LazyPsrl, 300, vec![3]);
        let env = resolve_env(&cfg).unwrap();
        let rec = run_episode(&env, &cfg, 3).unwrap();
        assert_eq!(rec.losses.len(), 300);
        assert!(!rec.resample_times.is_empty());
        assert!(rec.resample_times.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(rec.resample_times[0], 1);
        let report = assumption_monitors(&rec);
        assert!(report.det_doubling_holds);
        assert!(report.switch_bound_holds);
        assert!(report.outside_region_fraction.is_none());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let cfg = tabular_config(AgentKind::LazyPsrl, 300, vec![1, 2, 3, 4]);
        let par = run_experiment_with_mode(&cfg, ExecMode::Parallel).unwrap();
        let seq = run_experiment_with_mode(&cfg, ExecMode::Sequential).unwrap();
        assert_eq!(par.mean_regret, seq.mean_regret);
        assert_eq!(par.std_regret, seq.std_regret);
        assert_eq!(par.regret_csv(), seq.regret_csv());
    }

    #[test]
    fn deterministic_repetition() {
        let cfg = webserver_config(AgentKind::LazyPsrl, 100, vec![7]);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.regret_csv(), b.regret_csv());
        // One seed: std identically zero.
        assert!(a.std_regret.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn slope_fit_recovers_power_laws() {
        let t = 1000;
        let sqrt_curve: Vec<f64> = (1..=t).map(|i| 3.0 * (i as f64).sqrt()).collect();
        match fit_regret_exponent(&sqrt_curve, t / 2, t) {
            SlopeFit::Slope(s) => assert!((s - 0.5).abs() < 1e-6),
            _ => panic!("positive curve"),
        }
        let linear_curve: Vec<f64> = (1..=t).map(|i| 0.25 * i as f64).collect();
        match fit_regret_exponent(&linear_curve, t / 2, t) {
            SlopeFit::Slope(s) => assert!((s - 1.0).abs() < 1e-6),
            _ => panic!("positive curve"),
        }
        let noisy: Vec<f64> = (1..=t).map(|i| if i == 700 { -1.0 } else { 1.0 }).collect();
        assert_eq!(
            fit_regret_exponent(&noisy, t / 2, t),
            SlopeFit::BelowNoiseFloor
        );
    }

    #[test]
    fn summary_serializes() {
        let cfg = tabular_config(AgentKind::LazyPsrl, 100, vec![1, 2]);
        let result = run_experiment(&cfg).unwrap();
        let summary = summarize(&cfg, &result);
        assert_eq!(summary.switch_counts.len(), 2);
        assert!(summary.det_doubling_holds);
        let json = serde_json::to_string(&summary).unwrap();
        assert!(json.contains("config_fingerprint"));
    }

    #[test]
    fn trajectory_log_has_contract_fields() {
        let cfg = webserver_config(AgentKind::LazyPsrl, 5, vec![1]);
        let env = resolve_env(&cfg).unwrap();
        let rec = run_episode(&env, &cfg, 1).unwrap();
        let jsonl = rec.trajectory_jsonl();
        let first: serde_json::Value =
            serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        for key in ["t", "x", "a", "x_next", "loss", "resampled", "log_det"] {
            assert!(first.get(key).is_some(), "missing field {key}");
        }
        assert_eq!(first["t"], 1);
        assert_eq!(first["resampled"], true);
    }

    #[test]
    fn excursion_shows_up_in_smoothness_trace() {
        // Without the stabilized override, a large initial state drives the
        // smoothness map trace: ‖φ₁‖² ≥ ‖x₁‖². From the operating point the
        // first feature is exactly zero.
        let mut far = webserver_config(AgentKind::LazyPsrl, 50, vec![4]);
        far.env = "webserver-1.0".into();
        far.initial_state = Some(InitialState::Vector(vec![
            10.0 / 2.0f64.sqrt(),
            10.0 / 2.0f64.sqrt(),
        ]));
        let mut origin = far.clone();
        origin.initial_state = None;

        let env = resolve_env(&far).unwrap();
        let far_rec = run_episode(&env, &far, 4).unwrap();
        let origin_rec = run_episode(&env, &origin, 4).unwrap();
        let far_report = assumption_monitors(&far_rec);
        assert!(
            far_report.max_smooth_trace >= 100.0,
            "excursion trace {} should reflect ‖x₁‖² = 100",
            far_report.max_smooth_trace
        );
        assert_eq!(origin_rec.smooth_traces[0], 0.0);
        assert!(far_rec.smooth_traces[0] >= 100.0);
    }

    #[test]
    fn episode_error_names_seed() {
        let mut cfg = tabular_config(AgentKind::LazyPsrl, 10, vec![42]);
        cfg.initial_state = Some(InitialState::Index(99));
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().contains("seed 42"), "got: {err}");
    }
}
