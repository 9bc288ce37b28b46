//! The outer optimization loop: initial design, per-step maximization of
//! the hyperparameter-averaged value of information over candidates,
//! observation, and the final recommendation.

pub mod adam;
pub mod inner;

pub use adam::{adam_maximize, AdamConfig, GradStep};
pub use inner::{AscentInner, GridInner, InnerCfg};

use crate::acquisition::{self, ei_with_grad, h_exact, InnerMax};
use crate::error::{BqoError, Result};
use crate::gp::{fit, History};
use crate::inference::{self, HyperPrior, MapConfig, ParamSpace, SliceChain, SliceConfig};
use crate::kernels::{Env, HyperParams, KernelFamily, Point};
use crate::normal::derive_seed;
use crate::problems::{DecisionDomain, Problem, WDomain};
use crate::quadrature::{Measure, QuadPosterior};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Sampling policies available to the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Value of information on the integrand process, discretization-free.
    BqoMc,
    /// Value of information on the integrand process, discretized decision set.
    BqoDisc,
    /// Knowledge gradient on a process placed directly on the objective.
    Kg,
    /// Expected improvement on a process placed directly on the objective.
    Ei,
}

impl Algorithm {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "bqo_mc" => Ok(Algorithm::BqoMc),
            "bqo_disc" => Ok(Algorithm::BqoDisc),
            "kg" => Ok(Algorithm::Kg),
            "ei" => Ok(Algorithm::Ei),
            other => Err(BqoError::InvalidConfig(format!(
                "unknown algorithm '{other}'"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::BqoMc => "bqo_mc",
            Algorithm::BqoDisc => "bqo_disc",
            Algorithm::Kg => "kg",
            Algorithm::Ei => "ei",
        }
    }

    /// Whether the algorithm models the integrand (true) or the objective.
    pub fn models_integrand(&self) -> bool {
        matches!(self, Algorithm::BqoMc | Algorithm::BqoDisc)
    }
}

/// Which scheme computes the value of information.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    McFree,
    Discretized,
}

/// Noise variance assumed at candidate points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CandidateNoise {
    Auto,
    Fixed(f64),
    FromTheta,
    MeanObserved,
}

/// Hyperparameter treatment across the run.
#[derive(Debug, Clone)]
pub enum ThetaMode {
    /// Keep the template hyperparameters throughout.
    Fixed,
    /// Point estimate (MAP; MLE under a flat prior), refit on a schedule.
    /// `scale_only` frees only the signal variance, prior mean and noise
    /// variance, keeping length scales at their template values.
    Point {
        refit_every: usize,
        map: MapConfig,
        scale_only: bool,
    },
    /// Posterior samples via slice sampling, chains warm-started across
    /// steps; each acquisition gradient draw uses fresh samples.
    Bayes { j: usize, slice: SliceConfig },
}

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub algorithm: Algorithm,
    pub n0: usize,
    pub budget: usize,
    pub theta_mode: ThetaMode,
    pub prior: HyperPrior,
    pub adam: AdamConfig,
    pub inner: InnerCfg,
    /// None selects the scheme from the algorithm tag and dimension.
    pub scheme: Option<Scheme>,
    pub cand_noise: CandidateNoise,
    /// Lattice resolution per decision dimension for the discretized scheme.
    pub disc_grid_per_dim: usize,
    /// Points of the ranking lattice used to score optimizer restarts.
    pub rank_grid: usize,
    /// Finite-sum candidate environments are enumerated exhaustively up to
    /// this count and subsampled beyond it.
    pub max_w_enumeration: usize,
}

impl RunSettings {
    pub fn new(algorithm: Algorithm) -> Self {
        RunSettings {
            algorithm,
            n0: 0,
            budget: 0,
            theta_mode: ThetaMode::Point {
                refit_every: 5,
                map: MapConfig {
                    restarts: 4,
                    max_iters: 120,
                    restart_spread: 1.5,
                },
                scale_only: false,
            },
            prior: HyperPrior::flat(),
            adam: AdamConfig::default(),
            inner: InnerCfg::default(),
            scheme: None,
            cand_noise: CandidateNoise::Auto,
            disc_grid_per_dim: 32,
            rank_grid: 64,
            max_w_enumeration: 64,
        }
    }

    /// Default initial design size 2 (d + p) when unset.
    fn effective_n0(&self, d: usize, p: usize) -> usize {
        if self.n0 > 0 {
            self.n0
        } else {
            2 * (d + p).max(1)
        }
    }
}

/// One row of the run trace, appended after every step.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub cand_x: Option<Vec<f64>>,
    pub cand_w: Option<Env>,
    pub y: Option<f64>,
    pub recommendation: Vec<f64>,
    pub true_g: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub rows: Vec<TraceRow>,
    pub aborted: Option<String>,
    pub sample_calls: usize,
    /// Iterate perturbations triggered by the non-differentiable-point rule.
    pub perturbations: usize,
    /// Gradient draws requested at indicator-degenerate candidates; the
    /// perturbation rule should keep this at zero.
    pub degenerate_grads: usize,
}

/// Internal per-run state.
struct RunState {
    history: History,
    thetas: Vec<HyperParams>,
    /// Packed chain positions for the fully Bayesian mode.
    chain_positions: Vec<Vec<f64>>,
    steps_since_fit: usize,
    perturbations: usize,
    degenerate_grads: usize,
}

fn resolve_lambda(hist: &History, theta: &HyperParams, mode: CandidateNoise) -> f64 {
    match mode {
        CandidateNoise::Fixed(v) => v,
        CandidateNoise::FromTheta => theta.noise_var.unwrap_or(0.0),
        CandidateNoise::MeanObserved => hist.predictive_noise(theta),
        CandidateNoise::Auto => match theta.noise_var {
            Some(v) => v,
            None => hist.predictive_noise(theta),
        },
    }
}

fn uniform_lattice(bounds: &[(f64, f64)], per_dim: usize) -> Vec<Vec<f64>> {
    let d = bounds.len();
    let total = per_dim.pow(d as u32);
    let mut pts = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut p = Vec::with_capacity(d);
        for (lo, hi) in bounds {
            let i = idx % per_dim;
            idx /= per_dim;
            let frac = if per_dim == 1 {
                0.5
            } else {
                i as f64 / (per_dim - 1) as f64
            };
            p.push(lo + (hi - lo) * frac);
        }
        pts.push(p);
    }
    pts
}

fn halton_lattice(bounds: &[(f64, f64)], count: usize) -> Vec<Vec<f64>> {
    const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    let halton = |index: usize, base: usize| {
        let (mut f, mut r, mut i) = (1.0, 0.0, index);
        while i > 0 {
            f /= base as f64;
            r += f * (i % base) as f64;
            i /= base;
        }
        r
    };
    (1..=count)
        .map(|k| {
            bounds
                .iter()
                .enumerate()
                .map(|(d, (lo, hi))| lo + (hi - lo) * halton(k, PRIMES[d % PRIMES.len()]))
                .collect()
        })
        .collect()
}

/// Decision-set points used by the discretized scheme and by rankings.
fn decision_points(domain: &DecisionDomain, per_dim: usize) -> Vec<Vec<f64>> {
    match domain {
        DecisionDomain::Finite(pts) => pts.clone(),
        DecisionDomain::Box(b) => uniform_lattice(b, per_dim),
    }
}

fn ranking_points(domain: &DecisionDomain, count: usize) -> Vec<Vec<f64>> {
    match domain {
        DecisionDomain::Finite(pts) => pts.clone(),
        DecisionDomain::Box(b) => halton_lattice(b, count),
    }
}

/// Precomputed per-theta posterior pieces over a fixed decision lattice:
/// the posterior objective means and the B vectors, reused across every
/// candidate scored during one step.
struct LatticeEval<'a> {
    qps: &'a [QuadPosterior],
    lambdas: Vec<f64>,
    points: &'a [Vec<f64>],
    a_vals: Vec<Vec<f64>>,
    b_vecs: Vec<Vec<nalgebra::DVector<f64>>>,
}

impl<'a> LatticeEval<'a> {
    fn new(qps: &'a [QuadPosterior], lambdas: Vec<f64>, points: &'a [Vec<f64>]) -> Result<Self> {
        let mut a_vals = Vec::with_capacity(qps.len());
        let mut b_vecs = Vec::with_capacity(qps.len());
        for qp in qps {
            let mut avs = Vec::with_capacity(points.len());
            let mut bvs = Vec::with_capacity(points.len());
            for x in points {
                let b = qp.b_vec(x)?;
                avs.push(qp.a_from_b(&b));
                bvs.push(b);
            }
            a_vals.push(avs);
            b_vecs.push(bvs);
        }
        Ok(LatticeEval {
            qps,
            lambdas,
            points,
            a_vals,
            b_vecs,
        })
    }

    /// Mean over theta samples of the exact lattice value of information.
    fn voi(&self, cand: &Point) -> Result<f64> {
        let mut total = 0.0;
        for (j, qp) in self.qps.iter().enumerate() {
            let ctx = qp.candidate(cand, self.lambdas[j])?;
            if ctx.is_degenerate() {
                continue;
            }
            let mut slopes = Vec::with_capacity(self.points.len());
            for (i, x) in self.points.iter().enumerate() {
                let b_cand = qp.b_point(x, cand.as_ref())?;
                slopes.push(ctx.sigma_from_parts(&self.b_vecs[j][i], b_cand));
            }
            total += h_exact(&self.a_vals[j], &slopes)?.value;
        }
        Ok(total / self.qps.len() as f64)
    }
}

/// Draws a fresh hyperparameter sample set (posteriors plus candidate
/// noise levels) for one stochastic gradient evaluation.
type ThetaResampler<'a> =
    dyn FnMut(&mut dyn rand::Rng) -> Result<(Vec<QuadPosterior>, Vec<f64>)> + 'a;

fn build_qps(
    history: &History,
    thetas: &[HyperParams],
    family: KernelFamily,
    measure: &Measure,
) -> Result<Vec<QuadPosterior>> {
    thetas
        .iter()
        .map(|t| QuadPosterior::new(fit(history.clone(), t.clone(), family)?, measure.clone()))
        .collect()
}

/// Maximize the theta-averaged posterior objective mean over the decision
/// set (the recommendation rule). Deterministic given the posterior set.
fn maximize_mean_a(
    qps: &[QuadPosterior],
    domain: &DecisionDomain,
    inner_cfg: &InnerCfg,
) -> Result<Vec<f64>> {
    let mean_a = |x: &[f64]| -> Result<f64> {
        let mut s = 0.0;
        for qp in qps {
            s += qp.a(x)?;
        }
        Ok(s / qps.len() as f64)
    };
    match domain {
        DecisionDomain::Finite(pts) => {
            let mut best = f64::NEG_INFINITY;
            let mut arg = pts[0].clone();
            for p in pts {
                let v = mean_a(p)?;
                if v > best {
                    best = v;
                    arg = p.clone();
                }
            }
            Ok(arg)
        }
        DecisionDomain::Box(bounds) => {
            let mean_a_grad = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
                let mut v = 0.0;
                let mut g = vec![0.0; x.len()];
                for qp in qps {
                    v += qp.a(x)?;
                    for (gj, aj) in g.iter_mut().zip(qp.a_grad(x)?.iter()) {
                        *gj += aj;
                    }
                }
                let k = qps.len() as f64;
                Ok((v / k, g.iter().map(|x| x / k).collect()))
            };
            // Multi-start projected ascent: lattice starts plus a capped,
            // evenly spaced selection of observed decision vectors.
            let mut starts = halton_lattice(bounds, (2 * inner_cfg.starts).max(8));
            let hist = qps[0].state().history().points();
            let stride = (hist.len() / 8).max(1);
            for p in hist.iter().step_by(stride) {
                starts.push(p.x.clone());
            }
            let widths: Vec<f64> = bounds.iter().map(|(lo, hi)| hi - lo).collect();
            let mut best: Option<(f64, Vec<f64>)> = None;
            for start in starts {
                let mut x = start;
                adam::project(&mut x, bounds);
                let (mut value, mut grad) = mean_a_grad(&x)?;
                let mut step = 0.25;
                for _ in 0..inner_cfg.steps {
                    let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                    if gnorm < 1e-12 {
                        break;
                    }
                    let mut improved = false;
                    let mut s = step;
                    for _ in 0..25 {
                        let mut trial: Vec<f64> = x
                            .iter()
                            .zip(grad.iter().zip(widths.iter()))
                            .map(|(xv, (g, w))| xv + s * w * g / gnorm)
                            .collect();
                        adam::project(&mut trial, bounds);
                        let tv = mean_a(&trial)?;
                        if tv > value {
                            let (v2, g2) = mean_a_grad(&trial)?;
                            x = trial;
                            value = v2;
                            grad = g2;
                            improved = true;
                            step = (s * 2.0).min(0.5);
                            break;
                        }
                        s *= 0.5;
                    }
                    if !improved {
                        break;
                    }
                }
                if best.as_ref().is_none_or(|(bv, _)| value > *bv) {
                    best = Some((value, x));
                }
            }
            Ok(best.unwrap().1)
        }
    }
}

/// Is the iterate within the non-differentiability guard of a noiseless
/// observation?
fn near_noiseless_history(
    coords: &[f64],
    template: &Point,
    hist: &History,
    theta: &HyperParams,
) -> bool {
    let cand = template.from_coords(coords);
    for (i, p) in hist.points().iter().enumerate() {
        if !hist.is_noiseless_at(i, theta) {
            continue;
        }
        if p.w != cand.w {
            continue;
        }
        let close =
            p.x.iter()
                .zip(cand.x.iter())
                .all(|(a, b)| (a - b).abs() < 1e-9);
        if close {
            return true;
        }
    }
    false
}

/// The driver for one full run of one algorithm on one problem.
pub struct Runner<'a> {
    problem: &'a Problem,
    settings: &'a RunSettings,
    family: KernelFamily,
    theta_template: HyperParams,
    measure: Measure,
    scheme: Scheme,
    cand_noise: CandidateNoise,
}

impl<'a> Runner<'a> {
    pub fn new(problem: &'a Problem, settings: &'a RunSettings) -> Result<Self> {
        let models_f = settings.algorithm.models_integrand();
        let theta_template = if models_f {
            problem.theta_f.clone()
        } else {
            problem.theta_g.clone()
        };
        let family = if models_f {
            problem.family
        } else {
            sans_task(problem.family)
        };
        let measure = if models_f {
            problem.measure.clone()
        } else {
            Measure::single_atom(objective_atom(&theta_template))
        };
        let d = problem.domain.dim();
        let scheme = settings.scheme.unwrap_or(match settings.algorithm {
            Algorithm::BqoMc => Scheme::McFree,
            Algorithm::BqoDisc => Scheme::Discretized,
            _ => {
                if d <= 2 {
                    Scheme::Discretized
                } else {
                    Scheme::McFree
                }
            }
        });
        let cand_noise = settings.cand_noise;
        Ok(Runner {
            problem,
            settings,
            family,
            theta_template,
            measure,
            scheme,
            cand_noise,
        })
    }

    fn observe(
        &self,
        x: &[f64],
        w: Option<&Env>,
        rng: &mut dyn rand::Rng,
    ) -> Result<(f64, Option<f64>)> {
        match w {
            Some(env) => self.problem.sample_f(x, env.as_ref(), rng),
            None => self.problem.sample_g(x, rng),
        }
    }

    /// Observe with one retry, per the simulator-failure policy.
    fn observe_retry(
        &self,
        x: &[f64],
        w: Option<&Env>,
        rng: &mut dyn rand::Rng,
    ) -> std::result::Result<(f64, Option<f64>), String> {
        match self.observe(x, w, rng) {
            Ok(v) => Ok(v),
            Err(first) => match self.observe(x, w, rng) {
                Ok(v) => Ok(v),
                Err(second) => Err(format!("simulator failed twice: {first}; retry: {second}")),
            },
        }
    }

    fn fit_thetas(&self, state: &mut RunState, rng: &mut dyn rand::Rng) -> Result<()> {
        match &self.settings.theta_mode {
            ThetaMode::Fixed => {
                state.thetas = vec![self.theta_template.clone()];
            }
            ThetaMode::Point {
                map, scale_only, ..
            } => {
                let mask = scale_only.then(|| {
                    ParamSpace::new(&self.theta_template, self.family).scale_and_mean_mask()
                });
                let est = inference::map_estimate(
                    &state.history,
                    self.family,
                    &self.settings.prior,
                    &self.theta_template,
                    map,
                    mask,
                    rng,
                )?;
                state.thetas = vec![est];
            }
            ThetaMode::Bayes { j, slice } => {
                let space = ParamSpace::new(&self.theta_template, self.family);
                let first = state.chain_positions.is_empty();
                let burn = if first { slice.burn_in } else { 5 };
                if first {
                    state.chain_positions = vec![space.pack(&self.theta_template); *j];
                }
                let mut thetas = Vec::with_capacity(*j);
                for pos in state.chain_positions.iter_mut() {
                    let init = space.unpack(pos);
                    let mut chain = SliceChain::new(
                        &space,
                        &state.history,
                        &self.settings.prior,
                        &init,
                        None,
                        slice,
                    )?;
                    for _ in 0..burn {
                        chain.sweep(rng)?;
                    }
                    let current = chain.current();
                    *pos = space.pack(&current);
                    thetas.push(current);
                }
                state.thetas = thetas;
            }
        }
        state.steps_since_fit = 0;
        Ok(())
    }

    fn maybe_refit(&self, state: &mut RunState, rng: &mut dyn rand::Rng) -> Result<()> {
        state.steps_since_fit += 1;
        let due = match &self.settings.theta_mode {
            ThetaMode::Fixed => false,
            ThetaMode::Point { refit_every, .. } => state.steps_since_fit >= (*refit_every).max(1),
            // Chains advance every step.
            ThetaMode::Bayes { .. } => true,
        };
        if due {
            self.fit_thetas(state, rng)?;
        }
        Ok(())
    }

    /// Candidate environments for the finite-sum dispatch.
    fn candidate_envs(&self, rng: &mut dyn rand::Rng) -> Option<Vec<Env>> {
        if !self.settings.algorithm.models_integrand() {
            return Some(vec![objective_atom(&self.theta_template)]);
        }
        match &self.problem.w_domain {
            WDomain::Finite(envs) => {
                if envs.len() <= self.settings.max_w_enumeration {
                    Some(envs.clone())
                } else {
                    let mut picked = Vec::with_capacity(self.settings.max_w_enumeration);
                    let mut idx: Vec<usize> = (0..envs.len()).collect();
                    for k in 0..self.settings.max_w_enumeration {
                        let j = rng.random_range(k..idx.len());
                        idx.swap(k, j);
                        picked.push(envs[idx[k]].clone());
                    }
                    Some(picked)
                }
            }
            WDomain::Box(_) => None,
        }
    }

    /// One acquisition step: maximize the theta-averaged value of
    /// information over candidates, returning the chosen (x, w).
    fn select_candidate(
        &self,
        state: &mut RunState,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, Option<Env>)> {
        if !self.settings.algorithm.models_integrand() && self.settings.algorithm == Algorithm::Ei {
            let x = self.ei_step(state, rng)?;
            return Ok((x, None));
        }
        let qps = build_qps(&state.history, &state.thetas, self.family, &self.measure)?;
        let lambdas: Vec<f64> = state
            .thetas
            .iter()
            .map(|t| resolve_lambda(&state.history, t, self.cand_noise))
            .collect();
        // Fully Bayesian runs draw fresh posterior samples for every
        // stochastic gradient by advancing the warm chains; point-estimate
        // runs keep the step's samples throughout.
        let space = ParamSpace::new(&self.theta_template, self.family);
        let history_snap = state.history.clone();
        let mut chains = Vec::new();
        let mut thin = 1usize;
        if let ThetaMode::Bayes { slice, .. } = &self.settings.theta_mode {
            thin = slice.thin.max(1);
            for pos in &state.chain_positions {
                let init = space.unpack(pos);
                chains.push(SliceChain::new(
                    &space,
                    &history_snap,
                    &self.settings.prior,
                    &init,
                    None,
                    slice,
                )?);
            }
        }
        let mut fresh_box: Option<Box<ThetaResampler<'_>>> = if chains.is_empty() {
            None
        } else {
            let family = self.family;
            let measure = self.measure.clone();
            let cand_noise = self.cand_noise;
            let history = &history_snap;
            let chains = &mut chains;
            Some(Box::new(move |rng: &mut dyn rand::Rng| {
                let mut qps = Vec::with_capacity(chains.len());
                let mut lambdas = Vec::with_capacity(chains.len());
                for chain in chains.iter_mut() {
                    for _ in 0..thin {
                        chain.sweep(rng)?;
                    }
                    let theta = chain.current();
                    lambdas.push(resolve_lambda(history, &theta, cand_noise));
                    qps.push(QuadPosterior::new(
                        fit(history.clone(), theta, family)?,
                        measure.clone(),
                    )?);
                }
                Ok((qps, lambdas))
            }))
        };
        let envs = self.candidate_envs(rng);
        let chosen = match (&self.problem.domain, envs) {
            (DecisionDomain::Finite(xs), Some(envs)) => {
                // Full enumeration with the exact lattice value of information.
                let lattice = LatticeEval::new(&qps, lambdas.clone(), xs)?;
                let mut best = f64::NEG_INFINITY;
                let mut arg = (xs[0].clone(), envs[0].clone());
                for x in xs {
                    for env in &envs {
                        let cand = Point {
                            x: x.clone(),
                            w: env.clone(),
                        };
                        let v = lattice.voi(&cand)?;
                        if v > best {
                            best = v;
                            arg = (x.clone(), env.clone());
                        }
                    }
                }
                (arg.0, Some(arg.1))
            }
            (DecisionDomain::Box(bounds), Some(envs)) => {
                // Optimize over x separately for each environment, then take
                // the best environment.
                let rank_pts = ranking_points(&self.problem.domain, self.settings.rank_grid);
                let lattice = LatticeEval::new(&qps, lambdas.clone(), &rank_pts)?;
                let mut best = f64::NEG_INFINITY;
                let mut arg: Option<(Vec<f64>, Env)> = None;
                for env in &envs {
                    let template = Point {
                        x: vec![0.0; bounds.len()],
                        w: env.clone(),
                    };
                    let (x, score) = self.optimize_x_for_env(
                        state,
                        &qps,
                        &lambdas,
                        bounds,
                        &template,
                        &lattice,
                        fresh_box.as_deref_mut(),
                        rng,
                    )?;
                    if arg.is_none() || score > best {
                        best = score;
                        arg = Some((x, env.clone()));
                    }
                }
                let (x, env) = arg.unwrap();
                (x, Some(env))
            }
            (DecisionDomain::Box(bounds), None) => {
                // Joint optimization over (x, w) in the product box.
                let WDomain::Box(wb) = &self.problem.w_domain else {
                    unreachable!()
                };
                let mut joint = bounds.clone();
                joint.extend_from_slice(wb);
                let template = Point::cont(vec![0.0; bounds.len()], vec![0.0; wb.len()]);
                let rank_pts = ranking_points(&self.problem.domain, self.settings.rank_grid);
                let lattice = LatticeEval::new(&qps, lambdas.clone(), &rank_pts)?;
                let (coords, _) = self.optimize_candidate(
                    state,
                    &qps,
                    &lambdas,
                    &joint,
                    &template,
                    &lattice,
                    fresh_box.as_deref_mut(),
                    rng,
                )?;
                let cand = template.from_coords(&coords);
                (cand.x.clone(), Some(cand.w.clone()))
            }
            (DecisionDomain::Finite(xs), None) => {
                // Optimize w for each finite decision vector.
                let WDomain::Box(wb) = &self.problem.w_domain else {
                    unreachable!()
                };
                let rank_pts = ranking_points(&self.problem.domain, self.settings.rank_grid);
                let lattice = LatticeEval::new(&qps, lambdas.clone(), &rank_pts)?;
                let mut best = f64::NEG_INFINITY;
                let mut arg: Option<(Vec<f64>, Env)> = None;
                for x in xs {
                    let template = Point::cont(x.clone(), vec![0.0; wb.len()]);
                    let (coords, score) = self.optimize_candidate_fixed_x(
                        state,
                        &qps,
                        &lambdas,
                        wb,
                        &template,
                        &lattice,
                        fresh_box.as_deref_mut(),
                        rng,
                    )?;
                    let cand = template.from_coords(&coords);
                    if arg.is_none() || score > best {
                        best = score;
                        arg = Some((cand.x.clone(), cand.w.clone()));
                    }
                }
                let (x, env) = arg.unwrap();
                (x, Some(env))
            }
        };
        // Persist the advanced chain positions for the next step's warm
        // start.
        drop(fresh_box);
        if !chains.is_empty() {
            state.chain_positions = chains.iter().map(|c| space.pack(&c.current())).collect();
        }
        Ok(chosen)
    }

    /// Optimize the full candidate coordinate vector (x then any continuous
    /// w) over a box with the configured scheme.
    #[allow(clippy::too_many_arguments)]
    fn optimize_candidate(
        &self,
        state: &mut RunState,
        qps: &[QuadPosterior],
        lambdas: &[f64],
        bounds: &[(f64, f64)],
        template: &Point,
        lattice: &LatticeEval<'_>,
        fresh: Option<&mut ThetaResampler<'_>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, f64)> {
        let take = bounds.len();
        self.optimize_coords(
            state, qps, lambdas, bounds, template, lattice, take, None, fresh, rng,
        )
    }

    /// Optimize x for a fixed environment (finite-sum dispatch).
    #[allow(clippy::too_many_arguments)]
    fn optimize_x_for_env(
        &self,
        state: &mut RunState,
        qps: &[QuadPosterior],
        lambdas: &[f64],
        bounds: &[(f64, f64)],
        template: &Point,
        lattice: &LatticeEval<'_>,
        fresh: Option<&mut ThetaResampler<'_>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, f64)> {
        let take = bounds.len();
        let (coords, score) = self.optimize_coords(
            state, qps, lambdas, bounds, template, lattice, take, None, fresh, rng,
        )?;
        Ok((coords, score))
    }

    /// Optimize continuous w for a fixed finite decision vector.
    #[allow(clippy::too_many_arguments)]
    fn optimize_candidate_fixed_x(
        &self,
        state: &mut RunState,
        qps: &[QuadPosterior],
        lambdas: &[f64],
        w_bounds: &[(f64, f64)],
        template: &Point,
        lattice: &LatticeEval<'_>,
        fresh: Option<&mut ThetaResampler<'_>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, f64)> {
        let d = template.x.len();
        let (wc, score) = self.optimize_coords(
            state,
            qps,
            lambdas,
            w_bounds,
            template,
            lattice,
            w_bounds.len(),
            Some(d),
            fresh,
            rng,
        )?;
        let mut coords = template.x.clone();
        coords.extend_from_slice(&wc);
        Ok((coords, score))
    }

    /// Shared candidate-coordinate optimizer. `n_free` coordinates starting
    /// at `offset` (into the candidate's full coordinate vector) are free;
    /// the rest come from the template. Gradient draws follow the scheme;
    /// restarts and environments are ranked by the exact lattice VOI.
    #[allow(clippy::too_many_arguments)]
    fn optimize_coords(
        &self,
        state: &mut RunState,
        qps: &[QuadPosterior],
        lambdas: &[f64],
        free_bounds: &[(f64, f64)],
        template: &Point,
        lattice: &LatticeEval<'_>,
        n_free: usize,
        offset: Option<usize>,
        mut fresh: Option<&mut ThetaResampler<'_>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, f64)> {
        let offset = offset.unwrap_or(0);
        let full_template = template.coords();
        let assemble = |free: &[f64]| {
            let mut c = full_template.clone();
            c[offset..offset + n_free].copy_from_slice(free);
            c
        };
        let disc_points = match self.scheme {
            Scheme::Discretized => {
                decision_points(&self.problem.domain, self.settings.disc_grid_per_dim)
            }
            Scheme::McFree => Vec::new(),
        };
        let inner_solvers: Vec<Box<dyn InnerMax>> = match &self.problem.domain {
            DecisionDomain::Box(b) => vec![Box::new(AscentInner {
                bounds: b.clone(),
                cfg: self.settings.inner,
            }) as Box<dyn InnerMax>],
            DecisionDomain::Finite(pts) => vec![Box::new(GridInner {
                points: pts.clone(),
            })],
        };
        let inner = &*inner_solvers[0];
        let mut perturbations = 0usize;
        let mut degenerate = 0usize;
        let result = adam_maximize(
            free_bounds,
            &self.settings.adam,
            |free, rng| {
                let coords = assemble(free);
                if near_noiseless_history(
                    &coords,
                    template,
                    qps[0].state().history(),
                    qps[0].state().theta(),
                ) {
                    perturbations += 1;
                    return Ok(GradStep::NonDifferentiable);
                }
                let cand = template.from_coords(&coords);
                let drawn;
                let (qps_now, lambdas_now): (&[QuadPosterior], &[f64]) = match fresh.as_mut() {
                    Some(f) => {
                        drawn = f(rng)?;
                        (&drawn.0, &drawn.1)
                    }
                    None => (qps, lambdas),
                };
                let mut g = vec![0.0; n_free];
                for (j, qp) in qps_now.iter().enumerate() {
                    let ctx = qp.candidate(&cand, lambdas_now[j])?;
                    if ctx.is_degenerate() {
                        degenerate += 1;
                        return Ok(GradStep::NonDifferentiable);
                    }
                    let full = match self.scheme {
                        Scheme::McFree => {
                            let z: f64 = rng.sample(rand_distr::StandardNormal);
                            if z == 0.0 {
                                vec![0.0; qp.cand_dim()]
                            } else {
                                let y = inner.argmax(qp, Some(&ctx), z, rng)?;
                                ctx.sigma_grad_cand(&y)?
                                    .into_iter()
                                    .map(|v| v * z)
                                    .collect()
                            }
                        }
                        Scheme::Discretized => {
                            let disc =
                                crate::acquisition::Discretization::build(&ctx, &disc_points)?;
                            acquisition::voi_discretized(&ctx, &disc)?.1
                        }
                    };
                    for (k, gk) in g.iter_mut().enumerate() {
                        *gk += full[offset + k];
                    }
                }
                for gk in g.iter_mut() {
                    *gk /= qps_now.len() as f64;
                }
                Ok(GradStep::Grad(g))
            },
            |free, _| {
                let cand = template.from_coords(&assemble(free));
                lattice.voi(&cand)
            },
            rng,
        )?;
        state.perturbations += perturbations;
        state.degenerate_grads += degenerate;
        Ok(result)
    }

    /// Expected-improvement step over the decision set.
    fn ei_step(&self, state: &mut RunState, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let qps = build_qps(&state.history, &state.thetas, self.family, &self.measure)?;
        let mean_ei = |x: &[f64]| -> Result<f64> {
            let mut s = 0.0;
            for qp in &qps {
                s += acquisition::ei(qp, x)?;
            }
            Ok(s / qps.len() as f64)
        };
        match &self.problem.domain {
            DecisionDomain::Finite(pts) => {
                let mut best = f64::NEG_INFINITY;
                let mut arg = pts[0].clone();
                for p in pts {
                    let v = mean_ei(p)?;
                    if v > best {
                        best = v;
                        arg = p.clone();
                    }
                }
                Ok(arg)
            }
            DecisionDomain::Box(bounds) => {
                let (x, _) = adam_maximize(
                    bounds,
                    &self.settings.adam,
                    |x, _| {
                        let mut g = vec![0.0; x.len()];
                        for qp in &qps {
                            let (_, gi) = ei_with_grad(qp, x)?;
                            for (a, b) in g.iter_mut().zip(gi.iter()) {
                                *a += b;
                            }
                        }
                        for a in g.iter_mut() {
                            *a /= qps.len() as f64;
                        }
                        Ok(GradStep::Grad(g))
                    },
                    |x, _| mean_ei(x),
                    rng,
                )?;
                Ok(x)
            }
        }
    }

    fn recommend(&self, state: &RunState) -> Result<Vec<f64>> {
        let qps = build_qps(&state.history, &state.thetas, self.family, &self.measure)?;
        maximize_mean_a(&qps, &self.problem.domain, &self.settings.inner)
    }
}

fn sans_task(family: KernelFamily) -> KernelFamily {
    match family {
        KernelFamily::TaskMatern52 => KernelFamily::Matern52,
        f => f,
    }
}

/// The degenerate environment used when the process sits directly on the
/// objective: a zero-dimensional continuous coordinate.
fn objective_atom(_theta: &HyperParams) -> Env {
    Env::Cont(vec![])
}

/// Fit hyperparameters for the given history under the settings' mode and
/// propose the next candidate (x, w). The w part is None for algorithms
/// that observe the objective directly.
pub fn propose(
    problem: &Problem,
    settings: &RunSettings,
    history: &History,
    seed: u64,
) -> Result<(Vec<f64>, Option<Env>)> {
    let runner = Runner::new(problem, settings)?;
    let mut rng_theta = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let mut rng_step = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let mut state = RunState {
        history: history.clone(),
        thetas: Vec::new(),
        chain_positions: Vec::new(),
        steps_since_fit: 0,
        perturbations: 0,
        degenerate_grads: 0,
    };
    runner.fit_thetas(&mut state, &mut rng_theta)?;
    runner.select_candidate(&mut state, &mut rng_step)
}

/// Fit hyperparameters and return the decision vector maximizing the
/// averaged posterior objective mean.
pub fn recommend_from(
    problem: &Problem,
    settings: &RunSettings,
    history: &History,
    seed: u64,
) -> Result<Vec<f64>> {
    let runner = Runner::new(problem, settings)?;
    let mut rng_theta = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let mut state = RunState {
        history: history.clone(),
        thetas: Vec::new(),
        chain_positions: Vec::new(),
        steps_since_fit: 0,
        perturbations: 0,
        degenerate_grads: 0,
    };
    runner.fit_thetas(&mut state, &mut rng_theta)?;
    runner.recommend(&state)
}

/// Execute one full run: initial design, `budget` acquisition steps, and a
/// recommendation after every step. Exactly n0 + budget integrand samples
/// are drawn.
pub fn run(problem: &Problem, settings: &RunSettings, seed: u64) -> Result<RunOutcome> {
    let runner = Runner::new(problem, settings)?;
    let mut rng_design = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut rng_obs = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut rng_step = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let mut rng_theta = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let start = Instant::now();

    let models_f = settings.algorithm.models_integrand();
    let d = problem.domain.dim();
    let p = match (&problem.w_domain, models_f) {
        (WDomain::Box(b), true) => b.len(),
        _ => 0,
    };
    let n0 = settings.effective_n0(d, p);
    let mut state = RunState {
        history: History::new(),
        thetas: Vec::new(),
        chain_positions: Vec::new(),
        steps_since_fit: 0,
        perturbations: 0,
        degenerate_grads: 0,
    };
    let mut sample_calls = 0usize;
    let mut rows = Vec::with_capacity(settings.budget + 1);
    let mut aborted = None;

    // Initial design, uniform over the candidate space.
    for _ in 0..n0 {
        let x = problem.domain.sample_uniform(&mut rng_design);
        let (point, obs) = if models_f {
            let env = problem.w_domain.sample_uniform(&mut rng_design);
            let obs = runner.observe_retry(&x, Some(&env), &mut rng_obs);
            (Point { x: x.clone(), w: env }, obs)
        } else {
            let obs = runner.observe_retry(&x, None, &mut rng_obs);
            (
                Point {
                    x: x.clone(),
                    w: objective_atom(&runner.theta_template),
                },
                obs,
            )
        };
        match obs {
            Ok((y, lam)) => {
                sample_calls += 1;
                state.history.push(point, y, lam)?;
            }
            Err(msg) => {
                aborted = Some(msg);
                break;
            }
        }
    }
    if aborted.is_none() {
        runner.fit_thetas(&mut state, &mut rng_theta)?;
        let recommendation = runner.recommend(&state)?;
        rows.push(TraceRow {
            iteration: 0,
            cand_x: None,
            cand_w: None,
            y: None,
            recommendation: recommendation.clone(),
            true_g: problem.true_g(&recommendation),
            elapsed_s: start.elapsed().as_secs_f64(),
        });

        for it in 1..=settings.budget {
            let (x, mut w) = runner.select_candidate(&mut state, &mut rng_step)?;
            if !models_f {
                // Objective-modeling baselines observe G directly.
                w = None;
            }
            let obs = runner.observe_retry(&x, w.as_ref(), &mut rng_obs);
            let (y, lam) = match obs {
                Ok(v) => v,
                Err(msg) => {
                    aborted = Some(msg);
                    break;
                }
            };
            sample_calls += 1;
            let point = Point {
                x: x.clone(),
                w: w.clone()
                    .unwrap_or_else(|| objective_atom(&runner.theta_template)),
            };
            state.history.push(point, y, lam)?;
            runner.maybe_refit(&mut state, &mut rng_theta)?;
            let recommendation = runner.recommend(&state)?;
            rows.push(TraceRow {
                iteration: it,
                cand_x: Some(x),
                cand_w: w,
                y: Some(y),
                recommendation: recommendation.clone(),
                true_g: problem.true_g(&recommendation),
                elapsed_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(RunOutcome {
        rows,
        aborted,
        sample_calls,
        perturbations: state.perturbations,
        degenerate_grads: state.degenerate_grads,
    })
}
