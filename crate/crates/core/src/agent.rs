//! The lazy posterior-sampling control loop and its forcefully stabilized
//! variant.
//!
//! [`LazyPsrl`] keeps a sampled parameter Θ̃ and the plan computed from it,
//! and draws a fresh sample only when `det(V_t) > 2·det(V_last)` (checked in
//! log space). [`LazyPsrl::stabilized_act`] overrides the learned action
//! with a caller-supplied backup policy whenever the state leaves the safe
//! region, while the posterior keeps absorbing every transition.

use crate::linalg::{InfoMatrix, LinalgError};
use crate::planner::{
    greedy_action_tabular, lq_action, solve_acoe_tabular, solve_dare, AcoeSolution, LqSolution,
    PlannerError,
};
use crate::posterior::{DirichletPosterior, GaussianPosterior, PosteriorError};
use crate::env::{feature_map_linear, feature_map_tabular};
use crate::ParamMatrix;
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Planner attempts per resample before giving up on the posterior.
const MAX_PLAN_ATTEMPTS: usize = 10;

/// Log-space slack on the determinant comparison so that exact-boundary
/// cases (`det(V_t) = factor·det(V_last)`) stay on the strict "no resample"
/// side despite factor-level rounding.
const DET_COMPARE_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("planner failed on {attempts} consecutive posterior draws: {last}")]
    PlannerExhausted {
        attempts: usize,
        last: PlannerError,
    },
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("resample factor must exceed 1, got {0}")]
    BadResampleFactor(f64),
    #[error("safe region must contain the origin")]
    RegionExcludesOrigin,
}

/// Bounded safe region around the operating point.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SafeRegion {
    Ball { radius: f64 },
    Box { limits: Vec<(f64, f64)> },
}

impl SafeRegion {
    pub fn validate(&self) -> Result<(), AgentError> {
        let ok = match self {
            SafeRegion::Ball { radius } => *radius > 0.0,
            SafeRegion::Box { limits } => limits.iter().all(|(lo, hi)| *lo <= 0.0 && *hi >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(AgentError::RegionExcludesOrigin)
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        match self {
            SafeRegion::Ball { radius } => x.norm() <= *radius,
            SafeRegion::Box { limits } => x
                .iter()
                .zip(limits)
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
                && x.len() == limits.len(),
        }
    }
}

/// Whether plans come from posterior draws or the posterior mean (the
/// certainty-equivalence baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanSource {
    PosteriorSample,
    PosteriorMean,
}

/// A system family pluggable into the lazy control loop: a conjugate
/// posterior, a planner, and the information increments `M(x, a)`.
pub trait ControlFamily {
    type State: Clone + std::fmt::Debug;
    type Action: Clone + std::fmt::Debug;
    type Plan;

    fn sample_param(&self, rng: &mut ChaCha12Rng) -> ParamMatrix;
    fn mean_param(&self) -> ParamMatrix;
    fn plan(&self, param: &ParamMatrix) -> Result<Self::Plan, PlannerError>;
    /// Per-step suboptimality σ of a plan, in loss units.
    fn plan_sigma(&self, plan: &Self::Plan) -> f64;
    fn action(&self, plan: &Self::Plan, param: &ParamMatrix, x: &Self::State)
        -> Result<Self::Action, PlannerError>;
    fn absorb(
        &mut self,
        x: &Self::State,
        a: &Self::Action,
        x_next: &Self::State,
    ) -> Result<(), PosteriorError>;
    /// Rank-one increments added to `V_t` for this transition.
    fn info_increment(&self, x: &Self::State, a: &Self::Action) -> Vec<(f64, DVector<f64>)>;
    /// Trace of the smoothness map `M(x, a)` for the monitors.
    fn smooth_trace(&self, x: &Self::State, a: &Self::Action) -> f64;
    fn state_vector(&self, x: &Self::State) -> DVector<f64>;
    fn action_vector(&self, a: &Self::Action) -> DVector<f64>;
}

/// Tabular MDP family: Dirichlet posterior, average-cost planner.
#[derive(Debug, Clone)]
pub struct TabularFamily {
    pub posterior: DirichletPosterior,
    pub loss: DMatrix<f64>,
    pub eps_span: f64,
}

impl TabularFamily {
    pub fn new(posterior: DirichletPosterior, loss: DMatrix<f64>, eps_span: f64) -> Self {
        Self {
            posterior,
            loss,
            eps_span,
        }
    }

    /// Prior information matrix `V = diag(V', …, V')` with
    /// `V' = diag(α₁, …, α_n)`.
    pub fn prior_info_matrix(&self) -> InfoMatrix {
        self.posterior.implied_info_matrix()
    }
}

impl ControlFamily for TabularFamily {
    type State = usize;
    type Action = usize;
    type Plan = AcoeSolution;

    fn sample_param(&self, rng: &mut ChaCha12Rng) -> ParamMatrix {
        self.posterior.sample(rng)
    }

    fn mean_param(&self) -> ParamMatrix {
        self.posterior.mean()
    }

    fn plan(&self, param: &ParamMatrix) -> Result<Self::Plan, PlannerError> {
        solve_acoe_tabular(param, &self.loss, self.eps_span)
    }

    fn plan_sigma(&self, plan: &Self::Plan) -> f64 {
        plan.sigma
    }

    fn action(
        &self,
        plan: &Self::Plan,
        param: &ParamMatrix,
        x: &usize,
    ) -> Result<usize, PlannerError> {
        greedy_action_tabular(plan, param, &self.loss, *x)
    }

    fn absorb(&mut self, x: &usize, a: &usize, x_next: &usize) -> Result<(), PosteriorError> {
        self.posterior.observe(*x, *a, *x_next)
    }

    fn info_increment(&self, x: &usize, a: &usize) -> Vec<(f64, DVector<f64>)> {
        let n = self.posterior.state_count();
        let d = self.posterior.action_count();
        let phi = feature_map_tabular(*x, *a, n, d).expect("indices validated by absorb");
        vec![(1.0, phi)]
    }

    fn smooth_trace(&self, _x: &usize, _a: &usize) -> f64 {
        // M(x, a) = √2·diag(φ) has a single nonzero diagonal entry.
        std::f64::consts::SQRT_2
    }

    fn state_vector(&self, x: &usize) -> DVector<f64> {
        let n = self.posterior.state_count();
        let mut v = DVector::zeros(n);
        v[*x] = 1.0;
        v
    }

    fn action_vector(&self, a: &usize) -> DVector<f64> {
        DVector::from_row_slice(&[*a as f64])
    }
}

/// Linear-Gaussian family: column-wise Gaussian posterior, Riccati planner.
/// Observations are whitened by the known noise scale before they touch the
/// posterior or `V_t`.
#[derive(Debug, Clone)]
pub struct LinearFamily {
    pub posterior: GaussianPosterior,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub noise_std: f64,
    pub dare_tol: f64,
    pub dare_max_iter: usize,
}

impl LinearFamily {
    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.r.nrows()
    }

    /// Splits Θ into `(A, B)` via `Θᵀ = (A, B)`.
    pub fn split_param(&self, param: &ParamMatrix) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        let d = self.action_dim();
        let theta_t = param.transpose();
        (
            theta_t.view((0, 0), (n, n)).into_owned(),
            theta_t.view((0, n), (n, d)).into_owned(),
        )
    }
}

impl ControlFamily for LinearFamily {
    type State = DVector<f64>;
    type Action = DVector<f64>;
    type Plan = LqSolution;

    fn sample_param(&self, rng: &mut ChaCha12Rng) -> ParamMatrix {
        self.posterior.sample(rng)
    }

    fn mean_param(&self) -> ParamMatrix {
        self.posterior.mean().clone()
    }

    fn plan(&self, param: &ParamMatrix) -> Result<Self::Plan, PlannerError> {
        let (a, b) = self.split_param(param);
        solve_dare(&a, &b, &self.q, &self.r, self.dare_tol, self.dare_max_iter)
    }

    fn plan_sigma(&self, plan: &Self::Plan) -> f64 {
        plan.dare_residual
    }

    fn action(
        &self,
        plan: &Self::Plan,
        _param: &ParamMatrix,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>, PlannerError> {
        lq_action(plan, x)
    }

    fn absorb(
        &mut self,
        x: &DVector<f64>,
        a: &DVector<f64>,
        x_next: &DVector<f64>,
    ) -> Result<(), PosteriorError> {
        let phi = feature_map_linear(x, a) / self.noise_std;
        self.posterior.observe(&phi, &(x_next / self.noise_std))
    }

    fn info_increment(&self, x: &DVector<f64>, a: &DVector<f64>) -> Vec<(f64, DVector<f64>)> {
        let phi = feature_map_linear(x, a);
        vec![(1.0 / (self.noise_std * self.noise_std), phi)]
    }

    fn smooth_trace(&self, x: &DVector<f64>, a: &DVector<f64>) -> f64 {
        // M(x, a) = φφᵀ in the unwhitened coordinates.
        feature_map_linear(x, a).norm_squared()
    }

    fn state_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn action_vector(&self, a: &DVector<f64>) -> DVector<f64> {
        a.clone()
    }
}

/// Outcome of one `act` call.
#[derive(Debug, Clone)]
pub struct ActOutcome<A> {
    pub action: A,
    /// A fresh Θ̃ was drawn (and a new plan computed) at this step.
    pub resampled: bool,
    /// The safe-region override supplied this action.
    pub overridden: bool,
}

/// Per-transition bookkeeping returned by `observe`.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// Trace of the increment added to `V_t`.
    pub info_trace: f64,
    /// Trace of the smoothness map `M(x, a)`.
    pub smooth_trace: f64,
    /// `ln det(V_{t+1})` after the update.
    pub log_det: f64,
}

/// The lazy posterior-sampling controller.
#[derive(Debug, Clone)]
pub struct LazyPsrl<F: ControlFamily> {
    family: F,
    v: InfoMatrix,
    log_det_last: f64,
    theta: Option<ParamMatrix>,
    theta_fingerprint: u64,
    plan: Option<F::Plan>,
    plan_fingerprint: u64,
    resample_times: Vec<usize>,
    resample_concentrations: Vec<f64>,
    sigma_total: f64,
    step: usize,
    log_resample_factor: f64,
    source: PlanSource,
}

impl<F: ControlFamily> LazyPsrl<F> {
    pub fn new(family: F, v: InfoMatrix, source: PlanSource) -> Self {
        Self::with_resample_factor(family, v, source, 2.0).expect("factor 2 is valid")
    }

    /// Generalizes the doubling rule to `det(V_t) > factor·det(V_last)`.
    pub fn with_resample_factor(
        family: F,
        v: InfoMatrix,
        source: PlanSource,
        factor: f64,
    ) -> Result<Self, AgentError> {
        if factor <= 1.0 || !factor.is_finite() {
            return Err(AgentError::BadResampleFactor(factor));
        }
        let log_det_last = v.log_det();
        Ok(Self {
            family,
            v,
            log_det_last,
            theta: None,
            theta_fingerprint: 0,
            plan: None,
            plan_fingerprint: 0,
            resample_times: Vec::new(),
            resample_concentrations: Vec::new(),
            sigma_total: 0.0,
            step: 0,
            log_resample_factor: factor.ln(),
            source,
        })
    }

    pub fn family(&self) -> &F {
        &self.family
    }

    pub fn v(&self) -> &InfoMatrix {
        &self.v
    }

    pub fn log_det_last(&self) -> f64 {
        self.log_det_last
    }

    pub fn resample_times(&self) -> &[usize] {
        &self.resample_times
    }

    /// Concentration diagnostic `‖(Θ̃ − Θ̂)ᵀ V^{1/2}‖²` recorded at each
    /// resample, aligned with `resample_times`.
    pub fn resample_concentrations(&self) -> &[f64] {
        &self.resample_concentrations
    }

    /// Cumulative planner suboptimality Σ σ_t over all acted steps.
    pub fn sigma_total(&self) -> f64 {
        self.sigma_total
    }

    /// Time step of the next `act` call (1-based).
    pub fn current_step(&self) -> usize {
        self.step + 1
    }

    /// Fingerprint of the current Θ̃, stable under lazy steps.
    pub fn theta_fingerprint(&self) -> Option<u64> {
        self.theta.as_ref().map(|_| self.theta_fingerprint)
    }

    pub fn current_plan(&self) -> Option<&F::Plan> {
        // The cached plan always pairs with the cached Θ̃.
        debug_assert_eq!(self.theta_fingerprint, self.plan_fingerprint);
        self.plan.as_ref()
    }

    /// True when the determinant test `det(V_t) > factor·det(V_last)` fires,
    /// and at the very first step where no Θ̃ exists yet.
    pub fn should_resample(&self) -> bool {
        self.theta.is_none()
            || self.v.log_det() > self.log_resample_factor + self.log_det_last + DET_COMPARE_EPS
    }

    fn draw_param(&self, rng: &mut ChaCha12Rng) -> ParamMatrix {
        match self.source {
            PlanSource::PosteriorSample => self.family.sample_param(rng),
            PlanSource::PosteriorMean => self.family.mean_param(),
        }
    }

    fn resample(&mut self, rng: &mut ChaCha12Rng) -> Result<(), AgentError> {
        let mut last_err = None;
        let attempts = match self.source {
            PlanSource::PosteriorSample => MAX_PLAN_ATTEMPTS,
            // The mean is deterministic; retrying cannot help.
            PlanSource::PosteriorMean => 1,
        };
        for _ in 0..attempts {
            let theta = self.draw_param(rng);
            match self.family.plan(&theta) {
                Ok(plan) => {
                    let fp = fingerprint_matrix(&theta);
                    let stat = crate::posterior::concentration_stat(
                        &theta,
                        &self.family.mean_param(),
                        &self.v,
                    )?;
                    self.theta = Some(theta);
                    self.theta_fingerprint = fp;
                    self.plan = Some(plan);
                    self.plan_fingerprint = fp;
                    self.resample_times.push(self.current_step());
                    self.resample_concentrations.push(stat);
                    self.log_det_last = self.v.log_det();
                    return Ok(());
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(AgentError::PlannerExhausted {
            attempts,
            last: last_err.expect("at least one attempt"),
        })
    }

    /// Computes the action for state `x`, drawing a fresh Θ̃ first when the
    /// determinant test fires. Keeps Θ̃ otherwise.
    pub fn act(&mut self, x: &F::State, rng: &mut ChaCha12Rng) -> Result<ActOutcome<F::Action>, AgentError> {
        let resampled = if self.should_resample() {
            self.resample(rng)?;
            true
        } else {
            false
        };
        let theta = self.theta.as_ref().expect("resample populates theta");
        let plan = self.plan.as_ref().expect("resample populates plan");
        let action = self.family.action(plan, theta, x)?;
        self.sigma_total += self.family.plan_sigma(plan);
        Ok(ActOutcome {
            action,
            resampled,
            overridden: false,
        })
    }

    /// Forcefully stabilized variant: inside the safe region this is
    /// exactly `act`; outside, the backup policy supplies the action and
    /// the lazy state is left untouched (no draw, no planner call).
    pub fn stabilized_act(
        &mut self,
        region: &SafeRegion,
        pi_stab: impl Fn(&F::State) -> F::Action,
        x: &F::State,
        rng: &mut ChaCha12Rng,
    ) -> Result<ActOutcome<F::Action>, AgentError> {
        if region.contains(&self.family.state_vector(x)) {
            self.act(x, rng)
        } else {
            Ok(ActOutcome {
                action: pi_stab(x),
                resampled: false,
                overridden: true,
            })
        }
    }

    /// Feeds the executed transition to the posterior and to `V_t`, and
    /// advances the step counter.
    pub fn observe(
        &mut self,
        x: &F::State,
        a: &F::Action,
        x_next: &F::State,
    ) -> Result<StepInfo, AgentError> {
        self.family.absorb(x, a, x_next)?;
        let incs = self.family.info_increment(x, a);
        let info_trace: f64 = incs.iter().map(|(w, v)| w * v.norm_squared()).sum();
        self.v = self.v.updated(&incs)?;
        self.step += 1;
        Ok(StepInfo {
            info_trace,
            smooth_trace: self.family.smooth_trace(x, a),
            log_det: self.v.log_det(),
        })
    }
}

/// Order- and layout-sensitive fingerprint of a parameter matrix.
pub fn fingerprint_matrix(m: &ParamMatrix) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    (m.nrows(), m.ncols()).hash(&mut h);
    for v in m.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}
