//! Experiment configuration: a JSON file with per-run settings, overridable
//! from the command line for the common knobs.

use bqo::driver::{Algorithm, CandidateNoise, RunSettings, Scheme, ThetaMode};
use bqo::inference::{HyperPrior, MapConfig, SliceConfig};
use bqo::problems::{analytic_problem, branin_problem, gp_sim_problem, GpSimGrid, Problem};
use bqo::quadrature::Measure;
use bqo::{BqoError, Env};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub tag: String,
    /// Analytic problem: attach exact per-observation noise variances.
    #[serde(default = "default_true")]
    pub known_noise: bool,
    /// Simulated problems: approximate variance reduction ratio in (0, 1].
    #[serde(default = "default_a_ratio")]
    pub a_ratio: f64,
    /// Simulated problems: squared-exponential decay rate.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Simulated problems: draw seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}
fn default_a_ratio() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    16.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// "mle" | "map" | "bayes" | "fixed"
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_refit")]
    pub refit_every: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default = "default_map_restarts")]
    pub map_restarts: usize,
    #[serde(default = "default_map_iters")]
    pub map_iters: usize,
    /// Fit only the signal variance, prior mean and noise variance,
    /// keeping length scales at the problem's template values.
    #[serde(default)]
    pub scale_only: bool,
}

fn default_mode() -> String {
    "mle".into()
}
fn default_refit() -> usize {
    5
}
fn default_samples() -> usize {
    10
}
fn default_burn_in() -> usize {
    50
}
fn default_thin() -> usize {
    2
}
fn default_map_restarts() -> usize {
    3
}
fn default_map_iters() -> usize {
    80
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            mode: default_mode(),
            refit_every: default_refit(),
            samples: default_samples(),
            burn_in: default_burn_in(),
            thin: default_thin(),
            map_restarts: default_map_restarts(),
            map_iters: default_map_iters(),
            scale_only: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSection {
    #[serde(default = "d_step")]
    pub step: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_iters")]
    pub iters: usize,
    #[serde(default = "d_restarts")]
    pub restarts: usize,
}

fn d_step() -> f64 {
    0.05
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_iters() -> usize {
    50
}
fn d_restarts() -> usize {
    5
}

impl Default for AdamSection {
    fn default() -> Self {
        AdamSection {
            step: d_step(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            iters: d_iters(),
            restarts: d_restarts(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerSection {
    #[serde(default = "d_starts")]
    pub starts: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
}

fn d_starts() -> usize {
    4
}
fn d_steps() -> usize {
    50
}

impl Default for InnerSection {
    fn default() -> Self {
        InnerSection {
            starts: d_starts(),
            steps: d_steps(),
        }
    }
}

/// Measure override, mirroring the in-process measure kinds.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureConfig {
    Finite {
        support: Vec<serde_json::Value>,
        weights: Vec<f64>,
    },
    Gaussian {
        means: Vec<f64>,
        vars: Vec<f64>,
    },
    Nodes {
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

impl MeasureConfig {
    pub fn to_measure(&self) -> Result<Measure, BqoError> {
        let m = match self {
            MeasureConfig::Finite { support, weights } => {
                let mut envs = Vec::with_capacity(support.len());
                for v in support {
                    let env = match v {
                        serde_json::Value::Number(n) if n.is_u64() => Env::Task(n.as_u64().unwrap() as usize),
                        serde_json::Value::Array(xs) => {
                            let mut coords = Vec::with_capacity(xs.len());
                            for x in xs {
                                coords.push(x.as_f64().ok_or_else(|| {
                                    BqoError::InvalidConfig("measure support entries must be numbers".into())
                                })?);
                            }
                            Env::Cont(coords)
                        }
                        _ => {
                            return Err(BqoError::InvalidConfig(
                                "measure support entries must be arrays (continuous) or integers (tasks)".into(),
                            ))
                        }
                    };
                    envs.push(env);
                }
                Measure::Finite {
                    support: envs,
                    weights: weights.clone(),
                }
            }
            MeasureConfig::Gaussian { means, vars } => Measure::GaussianProduct {
                means: means.clone(),
                vars: vars.clone(),
            },
            MeasureConfig::Nodes { points, weights } => Measure::Nodes {
                points: points.clone(),
                weights: weights.clone(),
            },
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub algorithms: Vec<String>,
    pub budget: usize,
    /// Initial design size; 0 selects the 2(d+p) default.
    #[serde(default)]
    pub design: usize,
    #[serde(default = "d_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    pub out: String,
    /// Worker threads for replications; 0 uses all available cores.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub adam: AdamSection,
    #[serde(default)]
    pub inner: InnerSection,
    /// "auto" | "mc" | "disc"
    #[serde(default = "d_scheme")]
    pub scheme: String,
    #[serde(default = "d_grid")]
    pub disc_grid: usize,
    /// "auto" | "from_theta" | "mean_observed" | a number (fixed variance)
    #[serde(default)]
    pub cand_noise: Option<serde_json::Value>,
    /// Optional measure override.
    #[serde(default)]
    pub measure: Option<MeasureConfig>,
}

fn d_reps() -> usize {
    1
}
fn d_scheme() -> String {
    "auto".into()
}
fn d_grid() -> usize {
    32
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| format!("config parse error at line {}: {e}", e.line()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.reps < 1 {
            return Err("field 'reps': replication count must be >= 1".into());
        }
        if self.algorithms.is_empty() {
            return Err("field 'algorithms': at least one algorithm tag required".into());
        }
        for tag in &self.algorithms {
            Algorithm::parse(tag).map_err(|e| format!("field 'algorithms': {e}"))?;
        }
        match self.problem.tag.as_str() {
            "analytic" | "branin" | "gp_sim" => {}
            other => return Err(format!("field 'problem.tag': unknown problem '{other}'")),
        }
        match self.scheme.as_str() {
            "auto" | "mc" | "disc" => {}
            other => return Err(format!("field 'scheme': unknown scheme '{other}'")),
        }
        match self.inference.mode.as_str() {
            "mle" | "map" | "bayes" | "fixed" => {}
            other => return Err(format!("field 'inference.mode': unknown mode '{other}'")),
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<Problem, BqoError> {
        let mut p = match self.problem.tag.as_str() {
            "analytic" => analytic_problem(self.problem.known_noise),
            "branin" => branin_problem(),
            "gp_sim" => gp_sim_problem(
                self.problem.a_ratio,
                self.problem.beta,
                GpSimGrid::default(),
                self.problem.seed,
            )?,
            other => {
                return Err(BqoError::InvalidConfig(format!(
                    "unknown problem '{other}'"
                )))
            }
        };
        if let Some(mc) = &self.measure {
            p.measure = mc.to_measure()?;
        }
        Ok(p)
    }

    pub fn build_settings(&self, tag: &str) -> Result<RunSettings, BqoError> {
        let algorithm = Algorithm::parse(tag)?;
        let mut s = RunSettings::new(algorithm);
        s.n0 = self.design;
        s.budget = self.budget;
        s.adam.step = self.adam.step;
        s.adam.beta1 = self.adam.beta1;
        s.adam.beta2 = self.adam.beta2;
        s.adam.eps = self.adam.eps;
        s.adam.iters = self.adam.iters;
        s.adam.restarts = self.adam.restarts;
        s.inner.starts = self.inner.starts;
        s.inner.steps = self.inner.steps;
        s.disc_grid_per_dim = self.disc_grid;
        s.scheme = match self.scheme.as_str() {
            "auto" => None,
            "mc" => Some(Scheme::McFree),
            "disc" => Some(Scheme::Discretized),
            _ => unreachable!("validated"),
        };
        let map = MapConfig {
            restarts: self.inference.map_restarts,
            max_iters: self.inference.map_iters,
            restart_spread: 1.2,
        };
        let scale_only = self.inference.scale_only;
        (s.theta_mode, s.prior) = match self.inference.mode.as_str() {
            "mle" => (
                ThetaMode::Point {
                    refit_every: self.inference.refit_every,
                    map,
                    scale_only,
                },
                HyperPrior::flat(),
            ),
            "map" => (
                ThetaMode::Point {
                    refit_every: self.inference.refit_every,
                    map,
                    scale_only,
                },
                HyperPrior::default_weak(),
            ),
            "bayes" => (
                ThetaMode::Bayes {
                    j: self.inference.samples,
                    slice: SliceConfig {
                        n_samples: self.inference.samples,
                        burn_in: self.inference.burn_in,
                        thin: self.inference.thin,
                        ..SliceConfig::default()
                    },
                },
                HyperPrior::default_weak(),
            ),
            "fixed" => (ThetaMode::Fixed, HyperPrior::flat()),
            _ => unreachable!("validated"),
        };
        s.cand_noise = match &self.cand_noise {
            None => CandidateNoise::Auto,
            Some(serde_json::Value::String(tag)) => match tag.as_str() {
                "auto" => CandidateNoise::Auto,
                "from_theta" => CandidateNoise::FromTheta,
                "mean_observed" => CandidateNoise::MeanObserved,
                other => {
                    return Err(BqoError::InvalidConfig(format!(
                        "unknown cand_noise '{other}'"
                    )));
                }
            },
            Some(serde_json::Value::Number(n)) => CandidateNoise::Fixed(n.as_f64().unwrap()),
            Some(_) => {
                return Err(BqoError::InvalidConfig(
                    "cand_noise must be a tag string or fixed variance".into(),
                ));
            }
        };
        Ok(s)
    }
}
