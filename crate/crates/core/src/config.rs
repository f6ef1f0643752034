//! Hermetic experiment configuration: one JSON document fully determines an
//! experiment, and its content hash is embedded in every output for
//! provenance.

use crate::agent::SafeRegion;
use crate::env::{random_unichain, web_server_instance, EnvModel, EnvSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: &str, message: impl fmt::Display) -> Self {
        Self {
            field: field.to_string(),
            message: message.to_string(),
        }
    }
}

/// Agent arm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    LazyPsrl,
    StabilizedLazyPsrl,
    CertaintyEquivalence,
    Oracle,
    Random,
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            AgentKind::LazyPsrl => "lazy-psrl",
            AgentKind::StabilizedLazyPsrl => "stabilized-lazy-psrl",
            AgentKind::CertaintyEquivalence => "certainty-equivalence",
            AgentKind::Oracle => "oracle",
            AgentKind::Random => "random",
        };
        f.write_str(name)
    }
}

/// Prior parameters: `lambda` scales the Gaussian prior (covariance λ²I,
/// so precision (1/λ²)·I), `alpha` is the Dirichlet pseudo-count vector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PriorSpec {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: None,
        }
    }
}

/// Planner tolerances; defaults match the library-wide contracts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlannerTolerances {
    #[serde(default = "default_eps_span")]
    pub eps_span: f64,
    #[serde(default = "default_dare_tol")]
    pub dare_tol: f64,
    #[serde(default = "default_dare_max_iter")]
    pub dare_max_iter: usize,
}

fn default_eps_span() -> f64 {
    1e-6
}

fn default_dare_tol() -> f64 {
    1e-12
}

fn default_dare_max_iter() -> usize {
    100_000
}

impl Default for PlannerTolerances {
    fn default() -> Self {
        Self {
            eps_span: default_eps_span(),
            dare_tol: default_dare_tol(),
            dare_max_iter: default_dare_max_iter(),
        }
    }
}

/// Size and seed of the generated instance behind the `random-tabular`
/// builtin.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RandomTabularParams {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default)]
    pub gen_seed: u64,
}

fn default_n() -> usize {
    5
}

fn default_d() -> usize {
    2
}

impl Default for RandomTabularParams {
    fn default() -> Self {
        Self {
            n: default_n(),
            d: default_d(),
            gen_seed: 0,
        }
    }
}

/// Episode start state; defaults to state 0 / the origin.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum InitialState {
    Index(usize),
    Vector(Vec<f64>),
}

/// A complete experiment definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Builtin name (`webserver-0.1`, `webserver-1.0`, `random-tabular`) or
    /// path to an environment spec file.
    pub env: String,
    #[serde(default)]
    pub env_params: Option<RandomTabularParams>,
    pub agent: AgentKind,
    pub t: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub planner: PlannerTolerances,
    #[serde(default = "default_resample_factor")]
    pub resample_factor: f64,
    #[serde(default)]
    pub safe_region: Option<SafeRegion>,
    /// Backup gain for the stabilized variant, `d × n` rows. When absent,
    /// the gain is derived from the prior mean with cost `R/10`.
    #[serde(default)]
    pub stabilizer_gain: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub initial_state: Option<InitialState>,
    /// Noise-scale override for linear environments (used by sweeps).
    #[serde(default)]
    pub sigma_override: Option<f64>,
    #[serde(default)]
    pub out_dir: Option<String>,
}

fn default_resample_factor() -> f64 {
    2.0
}

pub const BUILTIN_ENVS: [&str; 3] = ["webserver-0.1", "webserver-1.0", "random-tabular"];

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(s).map_err(|e| ConfigError::new("<document>", e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Content hash over the experiment-defining fields (output routing is
    /// excluded so moving results does not change identity).
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Structural validation with field-level messages. Environment
    /// resolution is validated separately by [`resolve_env`].
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.t < 1 {
            return Err(ConfigError::new("t", "horizon must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::new("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(ConfigError::new("seeds", "seeds must be distinct"));
        }
        if self.resample_factor <= 1.0 || !self.resample_factor.is_finite() {
            return Err(ConfigError::new(
                "resample_factor",
                format!("must exceed 1, got {}", self.resample_factor),
            ));
        }
        if self.prior.lambda <= 0.0 || !self.prior.lambda.is_finite() {
            return Err(ConfigError::new(
                "prior.lambda",
                format!("must be positive, got {}", self.prior.lambda),
            ));
        }
        if let Some(alpha) = &self.prior.alpha {
            if alpha.is_empty() || alpha.iter().any(|&a| a <= 0.0 || !a.is_finite()) {
                return Err(ConfigError::new(
                    "prior.alpha",
                    "all pseudo-counts must be strictly positive",
                ));
            }
        }
        if self.planner.eps_span <= 0.0 || !self.planner.eps_span.is_finite() {
            return Err(ConfigError::new("planner.eps_span", "must be positive"));
        }
        if self.planner.dare_tol <= 0.0 || !self.planner.dare_tol.is_finite() {
            return Err(ConfigError::new("planner.dare_tol", "must be positive"));
        }
        if self.planner.dare_max_iter == 0 {
            return Err(ConfigError::new("planner.dare_max_iter", "must be at least 1"));
        }
        if let Some(sigma) = self.sigma_override {
            if sigma <= 0.0 || !sigma.is_finite() {
                return Err(ConfigError::new("sigma_override", "must be positive"));
            }
        }
        if let Some(region) = &self.safe_region {
            region
                .validate()
                .map_err(|e| ConfigError::new("safe_region", e))?;
        }
        if self.agent == AgentKind::StabilizedLazyPsrl && self.safe_region.is_none() {
            return Err(ConfigError::new(
                "safe_region",
                "required for the stabilized-lazy-psrl agent",
            ));
        }
        Ok(())
    }
}

/// Resolves the `env` field into a concrete model, applying any
/// noise-scale override.
pub fn resolve_env(cfg: &ExperimentConfig) -> Result<EnvModel, ConfigError> {
    let mut model = match cfg.env.as_str() {
        "webserver-0.1" => EnvModel::Linear(
            web_server_instance(0.1).map_err(|e| ConfigError::new("env", e))?,
        ),
        "webserver-1.0" => EnvModel::Linear(
            web_server_instance(1.0).map_err(|e| ConfigError::new("env", e))?,
        ),
        "random-tabular" => {
            let params = cfg.env_params.clone().unwrap_or_default();
            EnvModel::Tabular(random_unichain(params.n, params.d, params.gen_seed))
        }
        path => {
            if !Path::new(path).is_file() {
                return Err(ConfigError::new(
                    "env",
                    format!(
                        "`{path}` is neither a builtin ({}) nor an existing spec file",
                        BUILTIN_ENVS.join(", ")
                    ),
                ));
            }
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::new("env", format!("reading `{path}`: {e}")))?;
            EnvSpec::from_json(&text)
                .and_then(|s| s.to_model())
                .map_err(|e| ConfigError::new("env", format!("parsing `{path}`: {e}")))?
        }
    };
    if let Some(sigma) = cfg.sigma_override {
        match &mut model {
            EnvModel::Linear(env) => env.sigma = sigma,
            EnvModel::Tabular(_) => {
                return Err(ConfigError::new(
                    "sigma_override",
                    "only applies to linear environments",
                ));
            }
        }
    }
    Ok(model)
}

/// Parameters accepted by the sweep command.
pub const SWEEPABLE_PARAMS: [&str; 4] = ["lambda", "sigma", "t", "resample_factor"];

/// Returns a copy of the config with one sweepable parameter replaced.
pub fn apply_sweep_value(
    cfg: &ExperimentConfig,
    param: &str,
    value: f64,
) -> Result<ExperimentConfig, ConfigError> {
    let mut out = cfg.clone();
    match param {
        "lambda" => out.prior.lambda = value,
        "sigma" => out.sigma_override = Some(value),
        "t" => {
            if !(value.fract() == 0.0 && value >= 1.0) {
                return Err(ConfigError::new(
                    "t",
                    format!("sweep value {value} is not a positive integer"),
                ));
            }
            out.t = value as usize;
        }
        "resample_factor" => out.resample_factor = value,
        other => {
            return Err(ConfigError::new(
                "param",
                format!(
                    "`{other}` is not sweepable (choose one of {})",
                    SWEEPABLE_PARAMS.join(", ")
                ),
            ));
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(agent: AgentKind) -> ExperimentConfig {
        ExperimentConfig {
            env: "webserver-0.1".into(),
            env_params: None,
            agent,
            t: 10,
            seeds: vec![1, 2],
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
    fn validates_and_resolves_builtins() {
        let cfg = minimal(AgentKind::LazyPsrl);
        cfg.validate().unwrap();
        assert!(matches!(resolve_env(&cfg).unwrap(), EnvModel::Linear(_)));

        let mut cfg = minimal(AgentKind::LazyPsrl);
        cfg.env = "random-tabular".into();
        assert!(matches!(resolve_env(&cfg).unwrap(), EnvModel::Tabular(_)));

        let mut cfg = minimal(AgentKind::LazyPsrl);
        cfg.env = "no-such-builtin".into();
        let err = resolve_env(&cfg).unwrap_err();
        assert_eq!(err.field, "env");
    }

    #[test]
    fn field_level_validation_errors() {
        let mut cfg = minimal(AgentKind::LazyPsrl);
        cfg.t = 0;
        assert_eq!(cfg.validate().unwrap_err().field, "t");

        let mut cfg = minimal(AgentKind::LazyPsrl);
        cfg.seeds = vec![3, 3];
        assert_eq!(cfg.validate().unwrap_err().field, "seeds");

        let mut cfg = minimal(AgentKind::StabilizedLazyPsrl);
        cfg.safe_region = None;
        assert_eq!(cfg.validate().unwrap_err().field, "safe_region");

        let mut cfg = minimal(AgentKind::LazyPsrl);
        cfg.prior.lambda = -1.0;
        assert_eq!(cfg.validate().unwrap_err().field, "prior.lambda");
    }

    #[test]
    fn fingerprint_ignores_output_routing() {
        let mut a = minimal(AgentKind::LazyPsrl);
        let mut b = a.clone();
        a.out_dir = Some("x".into());
        b.out_dir = Some("y".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.t = 11;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn sweep_application() {
        let cfg = minimal(AgentKind::LazyPsrl);
        let swept = apply_sweep_value(&cfg, "lambda", 10.0).unwrap();
        assert_eq!(swept.prior.lambda, 10.0);
        let swept = apply_sweep_value(&cfg, "t", 50.0).unwrap();
        assert_eq!(swept.t, 50);
        assert!(apply_sweep_value(&cfg, "t", 2.5).is_err());
        assert!(apply_sweep_value(&cfg, "nope", 1.0).is_err());
        let swept = apply_sweep_value(&cfg, "sigma", 0.4).unwrap();
        match resolve_env(&swept).unwrap() {
            EnvModel::Linear(env) => assert_eq!(env.sigma, 0.4),
            _ => panic!("wrong family"),
        }
    }

    #[test]
    fn config_json_round_trip() {
        let json = r#"{
            "env": "webserver-1.0",
            "agent": "stabilized-lazy-psrl",
            "t": 100,
            "seeds": [0, 1],
            "safe_region": {"kind": "ball", "radius": 1.0},
            "initial_state": [7.0, 7.0]
        }"#;
        let cfg = ExperimentConfig::from_json(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.agent, AgentKind::StabilizedLazyPsrl);
        assert_eq!(cfg.prior.lambda, 1.0);
        assert_eq!(
            cfg.initial_state,
            Some(InitialState::Vector(vec![7.0, 7.0]))
        );
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }
}
