//! Hyperparameter treatment: slice sampling from the posterior over theta,
//! MAP/MLE point estimates, and the priors behind both.
//!
//! Positive parameters (signal variance, length-scale weights, noise
//! variance) are handled on the log scale; the prior-mean constant and the
//! free task-factor entries are unconstrained.

use crate::error::{BqoError, Result};
use crate::gp::{self, History};
use crate::kernels::{HyperParams, KernelFamily};
use rand::RngExt;

/// Prior over one hyperparameter, evaluated in its natural space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorKind {
    /// log v ~ N(mu, sigma^2); positive parameters only.
    LogNormal { mu: f64, sigma: f64 },
    /// v ~ N(mu, sigma^2); unconstrained parameters.
    Normal { mu: f64, sigma: f64 },
    /// v ~ InvGamma(shape, scale); positive parameters only.
    InvGamma { shape: f64, scale: f64 },
    /// Improper flat prior.
    Flat,
}

impl PriorKind {
    /// Log density in the parameter's natural space (up to constants that
    /// do not depend on the value).
    pub fn log_density(&self, v: f64) -> f64 {
        match *self {
            PriorKind::LogNormal { mu, sigma } => {
                if v <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let z = (v.ln() - mu) / sigma;
                -0.5 * z * z - v.ln() - sigma.ln()
            }
            PriorKind::Normal { mu, sigma } => {
                let z = (v - mu) / sigma;
                -0.5 * z * z - sigma.ln()
            }
            PriorKind::InvGamma { shape, scale } => {
                if v <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                -(shape + 1.0) * v.ln() - scale / v
            }
            PriorKind::Flat => 0.0,
        }
    }

    /// d log density / dv.
    pub fn log_density_grad(&self, v: f64) -> f64 {
        match *self {
            PriorKind::LogNormal { mu, sigma } => -((v.ln() - mu) / (sigma * sigma) + 1.0) / v,
            PriorKind::Normal { mu, sigma } => -(v - mu) / (sigma * sigma),
            PriorKind::InvGamma { shape, scale } => -(shape + 1.0) / v + scale / (v * v),
            PriorKind::Flat => 0.0,
        }
    }
}

/// Per-block priors for the hyperparameters of one model.
#[derive(Debug, Clone)]
pub struct HyperPrior {
    pub sigma0_sq: PriorKind,
    pub alpha: PriorKind,
    pub noise_var: PriorKind,
    pub mu0: PriorKind,
    pub task: PriorKind,
}

impl HyperPrior {
    /// Weakly regularizing defaults: heavy-tailed log-normals on positive
    /// parameters, flat on the prior mean, a wide normal on the free task
    /// factor entries.
    pub fn default_weak() -> Self {
        HyperPrior {
            sigma0_sq: PriorKind::LogNormal {
                mu: 0.0,
                sigma: 3.0,
            },
            alpha: PriorKind::LogNormal {
                mu: 0.0,
                sigma: 3.0,
            },
            noise_var: PriorKind::LogNormal {
                mu: 0.0,
                sigma: 3.0,
            },
            mu0: PriorKind::Flat,
            task: PriorKind::Normal {
                mu: 0.0,
                sigma: 3.0,
            },
        }
    }

    /// Flat everywhere; turns the MAP estimate into the MLE.
    pub fn flat() -> Self {
        HyperPrior {
            sigma0_sq: PriorKind::Flat,
            alpha: PriorKind::Flat,
            noise_var: PriorKind::Flat,
            mu0: PriorKind::Flat,
            task: PriorKind::Flat,
        }
    }
}

/// How a packed coordinate maps back into the hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Sigma0Sq,
    AlphaX(usize),
    AlphaW(usize),
    TaskFree(usize),
    Mu0,
    NoiseVar,
}

impl Slot {
    fn is_positive(&self) -> bool {
        matches!(
            self,
            Slot::Sigma0Sq | Slot::AlphaX(_) | Slot::AlphaW(_) | Slot::NoiseVar
        )
    }
}

/// The unconstrained parameter vector for one (family, shape) combination:
/// logs of positive parameters, raw values otherwise.
#[derive(Debug, Clone)]
pub struct ParamSpace {
    family: KernelFamily,
    slots: Vec<Slot>,
    template: HyperParams,
}

impl ParamSpace {
    pub fn new(template: &HyperParams, family: KernelFamily) -> Self {
        let mut slots = Vec::new();
        if family != KernelFamily::TaskMatern52 {
            slots.push(Slot::Sigma0Sq);
        }
        for i in 0..template.alpha_x.len() {
            slots.push(Slot::AlphaX(i));
        }
        for i in 0..template.alpha_w.len() {
            slots.push(Slot::AlphaW(i));
        }
        if let Some(task) = &template.task {
            for i in 0..task.free().len() {
                slots.push(Slot::TaskFree(i));
            }
        }
        slots.push(Slot::Mu0);
        if template.noise_var.is_some() {
            slots.push(Slot::NoiseVar);
        }
        ParamSpace {
            family,
            slots,
            template: template.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.slots.len()
    }

    /// Mask freeing only the signal variance, prior mean and noise
    /// variance, with length scales (and any task factor) frozen.
    pub fn scale_and_mean_mask(&self) -> Vec<bool> {
        self.slots
            .iter()
            .map(|s| matches!(s, Slot::Sigma0Sq | Slot::Mu0 | Slot::NoiseVar))
            .collect()
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn pack(&self, theta: &HyperParams) -> Vec<f64> {
        self.slots
            .iter()
            .map(|slot| match slot {
                Slot::Sigma0Sq => theta.sigma0_sq.ln(),
                Slot::AlphaX(i) => theta.alpha_x[*i].ln(),
                Slot::AlphaW(i) => theta.alpha_w[*i].ln(),
                Slot::TaskFree(i) => theta.task.as_ref().unwrap().free()[*i],
                Slot::Mu0 => theta.mu0,
                Slot::NoiseVar => theta.noise_var.unwrap().ln(),
            })
            .collect()
    }

    pub fn unpack(&self, u: &[f64]) -> HyperParams {
        let mut theta = self.template.clone();
        for (slot, v) in self.slots.iter().zip(u.iter()) {
            match slot {
                Slot::Sigma0Sq => theta.sigma0_sq = v.exp(),
                Slot::AlphaX(i) => theta.alpha_x[*i] = v.exp(),
                Slot::AlphaW(i) => theta.alpha_w[*i] = v.exp(),
                Slot::TaskFree(i) => theta.task.as_mut().unwrap().free_mut()[*i] = *v,
                Slot::Mu0 => theta.mu0 = *v,
                Slot::NoiseVar => theta.noise_var = Some(v.exp()),
            }
        }
        theta
    }

    fn prior_of(&self, slot: Slot, prior: &HyperPrior) -> PriorKind {
        match slot {
            Slot::Sigma0Sq => prior.sigma0_sq,
            Slot::AlphaX(_) | Slot::AlphaW(_) => prior.alpha,
            Slot::TaskFree(_) => prior.task,
            Slot::Mu0 => prior.mu0,
            Slot::NoiseVar => prior.noise_var,
        }
    }

    /// Log posterior kernel in the natural space: marginal likelihood plus
    /// log prior. This is the objective whose mode the MAP estimate finds.
    pub fn log_posterior(&self, u: &[f64], history: &History, prior: &HyperPrior) -> f64 {
        let theta = self.unpack(u);
        let ll = match gp::log_marginal_likelihood(history, &theta, self.family) {
            Ok(v) => v,
            Err(_) => return f64::NEG_INFINITY,
        };
        let mut lp = ll;
        for (slot, v) in self.slots.iter().zip(u.iter()) {
            let natural = if slot.is_positive() { v.exp() } else { *v };
            lp += self.prior_of(*slot, prior).log_density(natural);
        }
        lp
    }

    /// Log posterior density of the packed coordinates themselves: the
    /// natural-space density times the Jacobian of the log transform. This
    /// is the slice-sampling target.
    pub fn log_posterior_packed(&self, u: &[f64], history: &History, prior: &HyperPrior) -> f64 {
        let mut lp = self.log_posterior(u, history, prior);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        for (slot, v) in self.slots.iter().zip(u.iter()) {
            if slot.is_positive() {
                lp += v; // d(exp u)/du = exp u
            }
        }
        lp
    }

    /// Gradient of `log_posterior` with respect to the packed coordinates.
    pub fn log_posterior_grad(
        &self,
        u: &[f64],
        history: &History,
        prior: &HyperPrior,
    ) -> Result<(f64, Vec<f64>)> {
        let theta = self.unpack(u);
        let (ll, tg) = gp::log_marginal_likelihood_grad(history, &theta, self.family)?;
        let mut value = ll;
        let mut grad = Vec::with_capacity(self.slots.len());
        for slot in self.slots.iter() {
            let (natural, dll) = match slot {
                Slot::Sigma0Sq => (theta.sigma0_sq, tg.sigma0_sq),
                Slot::AlphaX(i) => (theta.alpha_x[*i], tg.alpha_x[*i]),
                Slot::AlphaW(i) => (theta.alpha_w[*i], tg.alpha_w[*i]),
                Slot::TaskFree(i) => (theta.task.as_ref().unwrap().free()[*i], tg.task[*i]),
                Slot::Mu0 => (theta.mu0, tg.mu0),
                Slot::NoiseVar => (theta.noise_var.unwrap(), tg.noise_var),
            };
            let pk = self.prior_of(*slot, prior);
            value += pk.log_density(natural);
            let d_natural = dll + pk.log_density_grad(natural);
            let chain = if slot.is_positive() { natural } else { 1.0 };
            grad.push(d_natural * chain);
        }
        Ok((value, grad))
    }
}

/// Settings for the coordinate-wise slice sampler.
#[derive(Debug, Clone)]
pub struct SliceConfig {
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Initial bracket width in packed coordinates.
    pub width: f64,
    /// Maximum stepping-out expansions per side.
    pub max_step_out: usize,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            n_samples: 10,
            burn_in: 50,
            thin: 2,
            width: 1.0,
            max_step_out: 32,
        }
    }
}

const MAX_SHRINK: usize = 100;

/// A resumable coordinate-wise slice sampling chain over the packed
/// hyperparameter coordinates, with stepping-out and shrinkage.
pub struct SliceChain<'a> {
    space: &'a ParamSpace,
    history: &'a History,
    prior: &'a HyperPrior,
    mask: Vec<bool>,
    u: Vec<f64>,
    log_p: f64,
    width: f64,
    max_step_out: usize,
}

impl<'a> SliceChain<'a> {
    pub fn new(
        space: &'a ParamSpace,
        history: &'a History,
        prior: &'a HyperPrior,
        theta_init: &HyperParams,
        mask: Option<Vec<bool>>,
        cfg: &SliceConfig,
    ) -> Result<Self> {
        let u = space.pack(theta_init);
        let mask = mask.unwrap_or_else(|| vec![true; space.dim()]);
        if mask.len() != space.dim() {
            return Err(BqoError::InvalidConfig("slice mask length mismatch".into()));
        }
        let log_p = space.log_posterior_packed(&u, history, prior);
        if !log_p.is_finite() {
            return Err(BqoError::InvalidConfig(
                "log posterior not finite at the slice sampler's initial point".into(),
            ));
        }
        Ok(SliceChain {
            space,
            history,
            prior,
            mask,
            u,
            log_p,
            width: cfg.width,
            max_step_out: cfg.max_step_out,
        })
    }

    pub fn current(&self) -> HyperParams {
        self.space.unpack(&self.u)
    }

    pub fn current_log_posterior(&self) -> f64 {
        self.log_p
    }

    /// One full coordinate sweep.
    pub fn sweep(&mut self, rng: &mut dyn rand::Rng) -> Result<()> {
        for k in 0..self.space.dim() {
            if !self.mask[k] {
                continue;
            }
            self.slice_coordinate(k, rng)?;
        }
        Ok(())
    }

    fn target(&self, u: &[f64]) -> f64 {
        self.space.log_posterior_packed(u, self.history, self.prior)
    }

    fn slice_coordinate(&mut self, k: usize, rng: &mut dyn rand::Rng) -> Result<()> {
        let x0 = self.u[k];
        let log_y = self.log_p + rng.random_range(0.0f64..1.0).ln();
        // Step out.
        let mut lo = x0 - self.width * rng.random_range(0.0f64..1.0);
        let mut hi = lo + self.width;
        let mut probe = self.u.clone();
        for _ in 0..self.max_step_out {
            probe[k] = lo;
            if self.target(&probe) <= log_y {
                break;
            }
            lo -= self.width;
        }
        for _ in 0..self.max_step_out {
            probe[k] = hi;
            if self.target(&probe) <= log_y {
                break;
            }
            hi += self.width;
        }
        // Shrink.
        for _ in 0..MAX_SHRINK {
            let x1 = rng.random_range(0.0f64..1.0) * (hi - lo) + lo;
            probe[k] = x1;
            let lp = self.target(&probe);
            if lp > log_y {
                self.u[k] = x1;
                self.log_p = lp;
                return Ok(());
            }
            if x1 < x0 {
                lo = x1;
            } else {
                hi = x1;
            }
        }
        Err(BqoError::SamplerStuck(format!(
            "coordinate {k}: shrinkage exhausted after {MAX_SHRINK} steps (bracket [{lo:.3e},{hi:.3e}], level {log_y:.3e})"
        )))
    }
}

/// Draw hyperparameter samples from the posterior given the history.
/// Coordinate-wise slice sampling in the packed (log) space with
/// stepping-out and shrinkage; reproducible given the generator.
#[allow(clippy::too_many_arguments)]
pub fn slice_sample(
    history: &History,
    family: KernelFamily,
    prior: &HyperPrior,
    theta_init: &HyperParams,
    cfg: &SliceConfig,
    mask: Option<Vec<bool>>,
    rng: &mut dyn rand::Rng,
) -> Result<Vec<HyperParams>> {
    let space = ParamSpace::new(theta_init, family);
    let mut chain = SliceChain::new(&space, history, prior, theta_init, mask, cfg)?;
    for _ in 0..cfg.burn_in {
        chain.sweep(rng)?;
    }
    let mut out = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        for _ in 0..cfg.thin.max(1) {
            chain.sweep(rng)?;
        }
        debug_assert!(chain.current_log_posterior().is_finite());
        out.push(chain.current());
    }
    Ok(out)
}

/// Settings for the MAP/MLE ascent.
#[derive(Debug, Clone)]
pub struct MapConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Initial scale of random restart perturbations in packed coordinates.
    pub restart_spread: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            restarts: 10,
            max_iters: 200,
            restart_spread: 1.5,
        }
    }
}

/// Multi-start gradient ascent with backtracking line search on the log
/// posterior (in the natural space, optimized through packed coordinates).
/// With a flat prior this is the maximum likelihood estimate.
pub fn map_estimate(
    history: &History,
    family: KernelFamily,
    prior: &HyperPrior,
    theta_init: &HyperParams,
    cfg: &MapConfig,
    mask: Option<Vec<bool>>,
    rng: &mut dyn rand::Rng,
) -> Result<HyperParams> {
    let space = ParamSpace::new(theta_init, family);
    let mask = mask.unwrap_or_else(|| vec![true; space.dim()]);
    if mask.len() != space.dim() {
        return Err(BqoError::InvalidConfig("map mask length mismatch".into()));
    }
    let u0 = space.pack(theta_init);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut any_converged = false;
    for restart in 0..cfg.restarts.max(1) {
        let mut u = u0.clone();
        if restart > 0 {
            for (j, v) in u.iter_mut().enumerate() {
                if mask[j] {
                    *v += rng.random_range(-cfg.restart_spread..cfg.restart_spread);
                }
            }
        }
        let Ok((mut value, mut grad)) = space.log_posterior_grad(&u, history, prior) else {
            continue;
        };
        if !value.is_finite() {
            continue;
        }
        let mut step = 0.5f64;
        for _ in 0..cfg.max_iters {
            for (g, m) in grad.iter_mut().zip(mask.iter()) {
                if !m {
                    *g = 0.0;
                }
            }
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < 1e-9 {
                break;
            }
            // Backtracking line search along the gradient, with the first
            // trial displacement capped so huge gradients cannot push the
            // packed coordinates into overflow territory.
            let mut improved = false;
            let mut s = step.min(10.0 / gnorm);
            for _ in 0..40 {
                let trial: Vec<f64> = u
                    .iter()
                    .zip(grad.iter())
                    .map(|(uv, g)| uv + s * g)
                    .collect();
                let lp = space.log_posterior(&trial, history, prior);
                if lp.is_finite() && lp > value {
                    if let Ok((v2, g2)) = space.log_posterior_grad(&trial, history, prior) {
                        u = trial;
                        value = v2;
                        grad = g2;
                        improved = true;
                        step = (s * 2.0).min(1.0);
                        break;
                    }
                }
                s *= 0.5;
            }
            if !improved {
                break;
            }
        }
        any_converged = true;
        if best.as_ref().is_none_or(|(bv, _)| value > *bv) {
            best = Some((value, u));
        }
    }
    match best {
        Some((_, u)) if any_converged => Ok(space.unpack(&u)),
        _ => Err(BqoError::OptimizationFailure(
            "no MAP restart converged".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Point;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn base_theta() -> HyperParams {
        HyperParams::iso(1.0, 1.0, 1, 0)
    }

    fn one_param_mask(space: &ParamSpace) -> Vec<bool> {
        // Only sigma0_sq free.
        let mut m = vec![false; space.dim()];
        m[0] = true;
        m
    }

    #[test]
    fn packed_round_trip() {
        let mut th = base_theta();
        th.noise_var = Some(0.3);
        th.mu0 = -0.7;
        let space = ParamSpace::new(&th, KernelFamily::SqExp);
        let u = space.pack(&th);
        let back = space.unpack(&u);
        assert!((back.sigma0_sq - th.sigma0_sq).abs() < 1e-14);
        assert!((back.noise_var.unwrap() - 0.3).abs() < 1e-14);
        assert_eq!(back.mu0, -0.7);
    }

    #[test]
    fn log_posterior_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut th = base_theta();
        th.alpha_w = vec![0.9];
        th.noise_var = Some(0.2);
        let mut h = History::new();
        for _ in 0..5 {
            h.push(
                Point::cont(
                    vec![rng.random_range(-1.0..1.0)],
                    vec![rng.random_range(-1.0..1.0)],
                ),
                rng.random_range(-1.0..1.0),
                None,
            )
            .unwrap();
        }
        let prior = HyperPrior::default_weak();
        let space = ParamSpace::new(&th, KernelFamily::SqExp);
        let u = space.pack(&th);
        let (_, g) = space.log_posterior_grad(&u, &h, &prior).unwrap();
        let step = 1e-6;
        for j in 0..space.dim() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += step;
            dn[j] -= step;
            let fd = (space.log_posterior(&up, &h, &prior) - space.log_posterior(&dn, &h, &prior))
                / (2.0 * step);
            assert!(
                (g[j] - fd).abs() < 1e-5 * fd.abs().max(1.0),
                "{j}: {} vs {fd}",
                g[j]
            );
        }
    }

    #[test]
    fn prior_recovery_with_no_data() {
        // Zero observations: the chain must reproduce the prior. One free
        // parameter with a log-normal prior; compare via the KS statistic.
        let th = base_theta();
        let prior = HyperPrior {
            sigma0_sq: PriorKind::LogNormal {
                mu: 0.3,
                sigma: 0.7,
            },
            ..HyperPrior::default_weak()
        };
        let space = ParamSpace::new(&th, KernelFamily::SqExp);
        let cfg = SliceConfig {
            n_samples: 10_000,
            burn_in: 100,
            thin: 1,
            ..SliceConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = slice_sample(
            &History::new(),
            KernelFamily::SqExp,
            &prior,
            &th,
            &cfg,
            Some(one_param_mask(&space)),
            &mut rng,
        )
        .unwrap();
        let mut logs: Vec<f64> = draws.iter().map(|t| t.sigma0_sq.ln()).collect();
        logs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // KS distance against N(0.3, 0.7^2).
        let n = logs.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, v) in logs.iter().enumerate() {
            let cdf = crate::normal::cdf((v - 0.3) / 0.7);
            let emp_hi = (i as f64 + 1.0) / n;
            let emp_lo = i as f64 / n;
            ks = ks.max((cdf - emp_hi).abs()).max((cdf - emp_lo).abs());
        }
        assert!(ks < 0.05, "KS statistic {ks}");
    }

    #[test]
    fn conjugate_inverse_gamma_posterior() {
        // Far-apart points make the Gram matrix effectively diagonal, so
        // y_i ~ N(mu0, v) iid with v = sigma0_sq. With an InvGamma(a, b)
        // prior the posterior is InvGamma(a + n/2, b + 0.5 sum (y-mu0)^2).
        let n = 8;
        let ys = [1.3, -0.4, 0.8, 2.1, -1.7, 0.2, 0.9, -0.6];
        let mut h = History::new();
        for (i, y) in ys.iter().enumerate() {
            h.push(Point::cont(vec![1e4 * i as f64], vec![]), *y, Some(0.0))
                .unwrap();
        }
        let th = HyperParams {
            mu0: 0.0,
            ..HyperParams::iso(1.0, 1.0, 1, 0)
        };
        let (a0, b0) = (2.0, 1.5);
        let prior = HyperPrior {
            sigma0_sq: PriorKind::InvGamma {
                shape: a0,
                scale: b0,
            },
            mu0: PriorKind::Flat,
            ..HyperPrior::default_weak()
        };
        let space = ParamSpace::new(&th, KernelFamily::SqExp);
        let cfg = SliceConfig {
            n_samples: 20_000,
            burn_in: 200,
            thin: 1,
            ..SliceConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = slice_sample(
            &h,
            KernelFamily::SqExp,
            &prior,
            &th,
            &cfg,
            Some(one_param_mask(&space)),
            &mut rng,
        )
        .unwrap();
        let mut vs: Vec<f64> = draws.iter().map(|t| t.sigma0_sq).collect();
        vs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let a_post = a0 + n as f64 / 2.0;
        let b_post = b0 + 0.5 * ys.iter().map(|y| y * y).sum::<f64>();
        // Closed-form posterior CDF via the regularized incomplete gamma:
        // P(V <= v) = 1 - P_gamma(a_post, b_post / v); quantiles by bisection.
        let cdf = |v: f64| 1.0 - reg_inc_gamma(a_post, b_post / v);
        for q in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let emp = vs[(q * vs.len() as f64) as usize];
            let (mut lo, mut hi) = (1e-3, 1e3);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if cdf(mid) < q {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let exact = 0.5 * (lo + hi);
            assert!(
                (emp - exact).abs() / exact < 0.02,
                "quantile {q}: sampled {emp} vs exact {exact}"
            );
        }
    }

    /// Regularized lower incomplete gamma P(a, x); series and continued
    /// fraction expansions.
    fn reg_inc_gamma(a: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let ln_gamma_a = ln_gamma(a);
        if x < a + 1.0 {
            let mut term = 1.0 / a;
            let mut sum = term;
            let mut ap = a;
            for _ in 0..500 {
                ap += 1.0;
                term *= x / ap;
                sum += term;
                if term.abs() < sum.abs() * 1e-15 {
                    break;
                }
            }
            sum * (-x + a * x.ln() - ln_gamma_a).exp()
        } else {
            let mut b = x + 1.0 - a;
            let mut c = 1e300;
            let mut d = 1.0 / b;
            let mut h = d;
            for i in 1..500 {
                let an = -(i as f64) * (i as f64 - a);
                b += 2.0;
                d = an * d + b;
                if d.abs() < 1e-300 {
                    d = 1e-300;
                }
                c = b + an / c;
                if c.abs() < 1e-300 {
                    c = 1e-300;
                }
                d = 1.0 / d;
                let del = d * c;
                h *= del;
                if (del - 1.0).abs() < 1e-15 {
                    break;
                }
            }
            1.0 - (-x + a * x.ln() - ln_gamma_a).exp() * h
        }
    }

    fn ln_gamma(x: f64) -> f64 {
        // Lanczos approximation.
        const G: [f64; 6] = [
            76.18009172947146,
            -86.50532032941677,
            24.01409824083091,
            -1.231739572450155,
            0.1208650973866179e-2,
            -0.5395239384953e-5,
        ];
        let mut ser = 1.000000000190015;
        let mut y = x;
        for gi in G {
            y += 1.0;
            ser += gi / y;
        }
        let tmp = x + 5.5 - (x + 0.5) * (x + 5.5).ln();
        -tmp + (2.5066282746310005 * ser / x).ln()
    }

    #[test]
    fn slice_seed_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let th = base_theta();
        let mut h = History::new();
        h.push(Point::cont(vec![0.0], vec![]), 0.5, Some(0.1))
            .unwrap();
        let prior = HyperPrior::default_weak();
        let cfg = SliceConfig {
            n_samples: 5,
            burn_in: 10,
            thin: 1,
            ..SliceConfig::default()
        };
        let d1 = slice_sample(&h, KernelFamily::SqExp, &prior, &th, &cfg, None, &mut rng).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let d2 = slice_sample(&h, KernelFamily::SqExp, &prior, &th, &cfg, None, &mut rng2).unwrap();
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert_eq!(a.sigma0_sq, b.sigma0_sq);
            assert_eq!(a.mu0, b.mu0);
        }
    }

    #[test]
    fn two_seeds_agree_in_distribution() {
        let th = base_theta();
        let mut h = History::new();
        for (x, y) in [(-0.5, 0.2), (0.0, 0.7), (0.5, 0.1), (0.9, -0.4)] {
            h.push(Point::cont(vec![x], vec![]), y, Some(0.05)).unwrap();
        }
        let prior = HyperPrior::default_weak();
        let cfg = SliceConfig {
            n_samples: 1000,
            burn_in: 100,
            thin: 1,
            ..SliceConfig::default()
        };
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draws =
                slice_sample(&h, KernelFamily::SqExp, &prior, &th, &cfg, None, &mut rng).unwrap();
            let logs: Vec<f64> = draws.iter().map(|t| t.sigma0_sq.ln()).collect();
            crate::normal::mean_se(&logs)
        };
        let (m1, s1) = run(11);
        let (m2, s2) = run(12);
        // MCMC autocorrelation inflates the naive SE; allow a wide band.
        let combined = (s1 * s1 + s2 * s2).sqrt() * 5.0;
        assert!(
            (m1 - m2).abs() < 3.0 * combined,
            "m1={m1} m2={m2} se={combined}"
        );
    }

    #[test]
    fn mle_single_observation_closed_form() {
        // One centered noiseless observation: the signal-variance MLE is y^2.
        let y1 = 0.8;
        let mut h = History::new();
        h.push(Point::cont(vec![0.4], vec![]), y1, Some(0.0))
            .unwrap();
        let th = HyperParams {
            mu0: 0.0,
            ..base_theta()
        };
        let space = ParamSpace::new(&th, KernelFamily::SqExp);
        let prior = HyperPrior::flat();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let est = map_estimate(
            &h,
            KernelFamily::SqExp,
            &prior,
            &th,
            &MapConfig::default(),
            Some(one_param_mask(&space)),
            &mut rng,
        )
        .unwrap();
        assert!(
            (est.sigma0_sq - y1 * y1).abs() < 1e-5,
            "MLE {} vs {}",
            est.sigma0_sq,
            y1 * y1
        );
    }

    #[test]
    fn map_matches_grid_search_on_two_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut h = History::new();
        for _ in 0..6 {
            h.push(
                Point::cont(vec![rng.random_range(-1.0..1.0)], vec![]),
                rng.random_range(-1.0..1.0),
                Some(0.05),
            )
            .unwrap();
        }
        let th = HyperParams {
            mu0: 0.0,
            ..base_theta()
        };
        let prior = HyperPrior::default_weak();
        let space = ParamSpace::new(&th, KernelFamily::SqExp);
        // Free parameters: sigma0_sq and alpha_x; mu0 frozen.
        let mask = vec![true, true, false];
        assert_eq!(space.dim(), 3);
        let est = map_estimate(
            &h,
            KernelFamily::SqExp,
            &prior,
            &th,
            &MapConfig::default(),
            Some(mask),
            &mut rng,
        )
        .unwrap();
        let u_est = space.pack(&est);
        let lp_est = space.log_posterior(&u_est, &h, &prior);
        let mut lp_grid = f64::NEG_INFINITY;
        for i in 0..80 {
            for j in 0..80 {
                let u = vec![
                    -4.0 + 8.0 * i as f64 / 79.0,
                    -4.0 + 8.0 * j as f64 / 79.0,
                    0.0,
                ];
                lp_grid = lp_grid.max(space.log_posterior(&u, &h, &prior));
            }
        }
        assert!(
            lp_est >= lp_grid - 1e-3,
            "map log-post {lp_est} below grid best {lp_grid}"
        );
    }

    #[test]
    fn map_value_dominates_initial_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut h = History::new();
        for _ in 0..5 {
            h.push(
                Point::cont(vec![rng.random_range(-1.0..1.0)], vec![]),
                rng.random_range(-1.0..1.0),
                Some(0.1),
            )
            .unwrap();
        }
        let th = base_theta();
        let prior = HyperPrior::default_weak();
        let space = ParamSpace::new(&th, KernelFamily::SqExp);
        let est = map_estimate(
            &h,
            KernelFamily::SqExp,
            &prior,
            &th,
            &MapConfig::default(),
            None,
            &mut rng,
        )
        .unwrap();
        let lp0 = space.log_posterior(&space.pack(&th), &h, &prior);
        let lp1 = space.log_posterior(&space.pack(&est), &h, &prior);
        assert!(lp1 >= lp0 - 1e-12, "{lp1} < {lp0}");
    }
}
