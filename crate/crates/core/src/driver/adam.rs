//! Multi-start stochastic gradient ascent over a box, with projection
//! after every step and an independent final ranking of the restarts.

use crate::error::{BqoError, Result};
use rand::RngExt;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    /// Base step, scaled per coordinate by the box width.
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iters: usize,
    pub restarts: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iters: 50,
            restarts: 5,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.iters > 0
            && self.restarts > 0;
        if ok {
            Ok(())
        } else {
            Err(BqoError::InvalidConfig("adam settings out of range".into()))
        }
    }
}

pub fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (xi, (lo, hi)) in x.iter_mut().zip(bounds.iter()) {
        *xi = xi.clamp(*lo, *hi);
    }
}

fn perturb_in_box(
    x: &[f64],
    radius: f64,
    bounds: &[(f64, f64)],
    rng: &mut dyn rand::Rng,
) -> Vec<f64> {
    let mut out: Vec<f64> = x
        .iter()
        .map(|v| v + rng.random_range(-radius..radius))
        .collect();
    project(&mut out, bounds);
    out
}

/// One gradient probe of the stochastic objective.
pub enum GradStep {
    Grad(Vec<f64>),
    /// The iterate sits at a non-differentiable point (a noiseless
    /// duplicate); perturb and retry without counting toward failures.
    NonDifferentiable,
}

/// Maximize a stochastic objective over a box. Non-finite gradient draws
/// perturb the iterate inside a small ball and count toward an error after
/// 5 consecutive failures; non-differentiable points perturb without
/// counting. Restarts are ranked by `rank_fn` (an independent, typically
/// higher-precision value estimate) and the best point is returned.
pub fn adam_maximize(
    bounds: &[(f64, f64)],
    cfg: &AdamConfig,
    mut grad_fn: impl FnMut(&[f64], &mut dyn rand::Rng) -> Result<GradStep>,
    mut rank_fn: impl FnMut(&[f64], &mut dyn rand::Rng) -> Result<f64>,
    rng: &mut dyn rand::Rng,
) -> Result<(Vec<f64>, f64)> {
    cfg.validate()?;
    let dims = bounds.len();
    let widths: Vec<f64> = bounds.iter().map(|(lo, hi)| (hi - lo).max(1e-12)).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..cfg.restarts {
        let mut x: Vec<f64> = bounds
            .iter()
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect();
        let mut m = vec![0.0; dims];
        let mut v = vec![0.0; dims];
        let mut failures = 0usize;
        let mut perturbs = 0usize;
        let mut t = 0usize;
        while t < cfg.iters {
            let g = match grad_fn(&x, rng)? {
                GradStep::Grad(g) if g.iter().all(|gi| gi.is_finite()) => {
                    failures = 0;
                    g
                }
                GradStep::NonDifferentiable => {
                    perturbs += 1;
                    if perturbs > 4 * cfg.iters {
                        return Err(BqoError::OptimizationFailure(
                            "perturbation loop failed to leave the non-differentiable set".into(),
                        ));
                    }
                    x = perturb_in_box(&x, 1e-3, bounds, rng);
                    continue;
                }
                GradStep::Grad(_) => {
                    failures += 1;
                    if failures >= 5 {
                        return Err(BqoError::OptimizationFailure(
                            "5 consecutive non-finite gradient draws".into(),
                        ));
                    }
                    x = perturb_in_box(&x, 1e-3, bounds, rng);
                    continue;
                }
            };
            t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(t as i32);
            for j in 0..dims {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                x[j] += cfg.step * widths[j] * mhat / (vhat.sqrt() + cfg.eps);
            }
            project(&mut x, bounds);
        }
        let score = rank_fn(&x, rng)?;
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, x));
        }
    }
    let (score, x) =
        best.ok_or_else(|| BqoError::OptimizationFailure("no adam restart finished".into()))?;
    Ok((x, score))
}
