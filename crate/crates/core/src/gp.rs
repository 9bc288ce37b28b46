//! Gaussian process posterior over the integrand given observed history,
//! plus the log marginal likelihood used for hyperparameter inference.

use crate::error::{BqoError, Result};
use crate::kernels::{self, HyperParams, KernelFamily, Point, PointRef};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Observed triples (x_i, w_i, y_i) with optional per-observation noise
/// variance estimates. `noise_vars` is all-or-nothing: either every
/// observation carries an estimate, or none does and the homogeneous
/// variance comes from the hyperparameters.
#[derive(Debug, Clone, Default)]
pub struct History {
    points: Vec<Point>,
    values: Vec<f64>,
    noise_vars: Option<Vec<f64>>,
}

impl History {
    pub fn new() -> Self {
        History::default()
    }

    pub fn push(&mut self, point: Point, value: f64, noise_var: Option<f64>) -> Result<()> {
        if !value.is_finite() {
            return Err(BqoError::InvalidConfig("observation must be finite".into()));
        }
        match (noise_var, self.noise_vars.as_mut()) {
            (Some(nv), Some(list)) => {
                if !(nv.is_finite() && nv >= 0.0) {
                    return Err(BqoError::InvalidConfig(
                        "noise variance must be finite and >= 0".into(),
                    ));
                }
                list.push(nv);
            }
            (Some(nv), None) => {
                if !self.points.is_empty() {
                    return Err(BqoError::InvalidConfig(
                        "noise variances must be attached to all observations or none".into(),
                    ));
                }
                if !(nv.is_finite() && nv >= 0.0) {
                    return Err(BqoError::InvalidConfig(
                        "noise variance must be finite and >= 0".into(),
                    ));
                }
                self.noise_vars = Some(vec![nv]);
            }
            (None, Some(_)) => {
                return Err(BqoError::InvalidConfig(
                    "noise variances must be attached to all observations or none".into(),
                ));
            }
            (None, None) => {}
        }
        self.points.push(point);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn noise_vars(&self) -> Option<&[f64]> {
        self.noise_vars.as_deref()
    }

    /// Per-observation noise used on the Gram diagonal: attached estimates
    /// when present, otherwise the homogeneous hyperparameter (0 if absent).
    pub fn effective_noise(&self, theta: &HyperParams) -> Vec<f64> {
        match &self.noise_vars {
            Some(v) => v.clone(),
            None => vec![theta.noise_var.unwrap_or(0.0); self.len()],
        }
    }

    /// Noise variance assumed for a hypothetical next observation: the mean
    /// of attached estimates when present, otherwise the homogeneous
    /// hyperparameter (0 if absent).
    pub fn predictive_noise(&self, theta: &HyperParams) -> f64 {
        match &self.noise_vars {
            Some(v) if !v.is_empty() => v.iter().sum::<f64>() / v.len() as f64,
            _ => theta.noise_var.unwrap_or(0.0),
        }
    }

    /// Whether the observation at index `i` was recorded noiseless.
    pub fn is_noiseless_at(&self, i: usize, theta: &HyperParams) -> bool {
        match &self.noise_vars {
            Some(v) => v[i] == 0.0,
            None => theta.noise_var.unwrap_or(0.0) == 0.0,
        }
    }
}

const JITTER_START_FRAC: f64 = 1e-10;
const JITTER_MAX_FRAC: f64 = 1e-4;

/// Factorized Gaussian process posterior. Immutable once fitted.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    history: History,
    theta: HyperParams,
    family: KernelFamily,
    chol: Option<Cholesky<f64, Dyn>>,
    /// A^{-1} (y - mu0 * 1).
    resid_solve: DVector<f64>,
    /// Mean of the prior Gram diagonal; the scale used for jitter and the
    /// variance clamp (equals sigma0_sq for stationary families).
    scale: f64,
    jitter: f64,
}

/// Fit the posterior: factorize the Gram-plus-noise matrix and pre-solve
/// against the residuals. Jitter starts at 1e-10 of the diagonal scale and
/// escalates by factors of 10 up to 1e-4 before giving up.
pub fn fit(history: History, theta: HyperParams, family: KernelFamily) -> Result<PosteriorState> {
    let n = history.len();
    if n == 0 {
        let scale = theta.sigma0_sq.max(f64::MIN_POSITIVE);
        return Ok(PosteriorState {
            history,
            theta,
            family,
            chol: None,
            resid_solve: DVector::zeros(0),
            scale,
            jitter: 0.0,
        });
    }
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernels::kernel_eval(
                &theta,
                family,
                history.points()[i].as_ref(),
                history.points()[j].as_ref(),
            )?;
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let scale = gram.diagonal().sum() / n as f64;
    // `!(scale > 0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !scale.is_finite() || !(scale > 0.0) || gram.iter().any(|v| !v.is_finite()) {
        return Err(BqoError::IllConditioned {
            max_jitter: 0.0,
            scale,
        });
    }
    let noise = history.effective_noise(&theta);
    for (i, nv) in noise.iter().enumerate() {
        if !nv.is_finite() {
            return Err(BqoError::IllConditioned {
                max_jitter: 0.0,
                scale,
            });
        }
        gram[(i, i)] += nv;
    }
    let mut jitter = JITTER_START_FRAC * scale;
    let mut chol = None;
    while jitter <= JITTER_MAX_FRAC * scale {
        let mut a = gram.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(c) = a.cholesky() {
            chol = Some(c);
            break;
        }
        jitter *= 10.0;
    }
    let Some(chol) = chol else {
        return Err(BqoError::IllConditioned {
            max_jitter: jitter / 10.0,
            scale,
        });
    };
    let resid = DVector::from_iterator(n, history.values().iter().map(|y| y - theta.mu0));
    let resid_solve = chol.solve(&resid);
    Ok(PosteriorState {
        history,
        theta,
        family,
        chol: Some(chol),
        resid_solve,
        scale,
        jitter,
    })
}

impl PosteriorState {
    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn theta(&self) -> &HyperParams {
        &self.theta
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn diag_scale(&self) -> f64 {
        self.scale
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn resid_solve(&self) -> &DVector<f64> {
        &self.resid_solve
    }

    /// Prior covariances between a query and every history point.
    pub fn k_vec(&self, q: PointRef) -> Result<DVector<f64>> {
        let n = self.len();
        let mut k = DVector::zeros(n);
        for i in 0..n {
            k[i] = kernels::kernel_eval(
                &self.theta,
                self.family,
                q,
                self.history.points()[i].as_ref(),
            )?;
        }
        Ok(k)
    }

    /// Solve A v = b against the fitted factorization.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            Some(c) => c.solve(b),
            None => DVector::zeros(0),
        }
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.chol {
            Some(c) => c.solve(b),
            None => DMatrix::zeros(0, b.ncols()),
        }
    }

    pub fn log_det(&self) -> f64 {
        match &self.chol {
            Some(c) => 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
            None => 0.0,
        }
    }

    pub fn posterior_mean(&self, q: PointRef) -> Result<f64> {
        if self.is_empty() {
            return Ok(self.theta.mu0);
        }
        let k = self.k_vec(q)?;
        Ok(self.theta.mu0 + k.dot(&self.resid_solve))
    }

    /// Gradient of the posterior mean with respect to the free coordinates
    /// of the query (decision part, then continuous environmental part).
    pub fn posterior_mean_grad(&self, q: PointRef) -> Result<Vec<f64>> {
        let dims = q.x.len()
            + match q.w {
                crate::kernels::EnvRef::Cont(w) => w.len(),
                crate::kernels::EnvRef::Task(_) => 0,
            };
        let mut g = vec![0.0; dims];
        for (i, p) in self.history.points().iter().enumerate() {
            let kg = kernels::kernel_grad(&self.theta, self.family, q, p.as_ref())?;
            for (gj, kj) in g.iter_mut().zip(kg.iter()) {
                *gj += kj * self.resid_solve[i];
            }
        }
        Ok(g)
    }

    pub fn posterior_cov(&self, q1: PointRef, q2: PointRef) -> Result<f64> {
        let prior = kernels::kernel_eval(&self.theta, self.family, q1, q2)?;
        if self.is_empty() {
            return Ok(prior);
        }
        let k1 = self.k_vec(q1)?;
        let k2 = self.k_vec(q2)?;
        Ok(prior - k1.dot(&self.solve(&k2)))
    }

    /// Posterior variance, clamped to zero within the numerical tolerance
    /// band; meaningfully negative values are an error.
    pub fn posterior_var(&self, q: PointRef) -> Result<f64> {
        let v = self.posterior_cov(q, q)?;
        if v < -1e-8 * self.scale {
            return Err(BqoError::NumericalConsistency(format!(
                "posterior variance {v:.3e} below tolerance (scale {:.3e})",
                self.scale
            )));
        }
        Ok(v.max(0.0))
    }
}

/// Log marginal likelihood of the observations under (theta, family).
pub fn log_marginal_likelihood(
    history: &History,
    theta: &HyperParams,
    family: KernelFamily,
) -> Result<f64> {
    let state = fit(history.clone(), theta.clone(), family)?;
    let n = history.len();
    if n == 0 {
        return Ok(0.0);
    }
    let resid = DVector::from_iterator(n, history.values().iter().map(|y| y - theta.mu0));
    Ok(-0.5 * resid.dot(&state.resid_solve)
        - 0.5 * state.log_det()
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Gradient of the log marginal likelihood with respect to every
/// hyperparameter, in the natural (constrained) parametrization.
#[derive(Debug, Clone)]
pub struct ThetaGrad {
    pub sigma0_sq: f64,
    pub alpha_x: Vec<f64>,
    pub alpha_w: Vec<f64>,
    pub task: Vec<f64>,
    pub mu0: f64,
    pub noise_var: f64,
}

pub fn log_marginal_likelihood_grad(
    history: &History,
    theta: &HyperParams,
    family: KernelFamily,
) -> Result<(f64, ThetaGrad)> {
    let state = fit(history.clone(), theta.clone(), family)?;
    let n = history.len();
    let d = theta.alpha_x.len();
    let p = theta.alpha_w.len();
    let n_task = theta.task.as_ref().map_or(0, |t| t.free().len());
    let mut grad = ThetaGrad {
        sigma0_sq: 0.0,
        alpha_x: vec![0.0; d],
        alpha_w: vec![0.0; p],
        task: vec![0.0; n_task],
        mu0: 0.0,
        noise_var: 0.0,
    };
    if n == 0 {
        return Ok((0.0, grad));
    }
    let resid = DVector::from_iterator(n, history.values().iter().map(|y| y - theta.mu0));
    let alpha = &state.resid_solve;
    let value = -0.5 * resid.dot(alpha)
        - 0.5 * state.log_det()
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // W = alpha alpha^T - A^{-1}; dL/dtheta_k = 0.5 tr(W dA/dtheta_k).
    let a_inv = state.solve_matrix(&DMatrix::identity(n, n));
    for i in 0..n {
        for j in 0..=i {
            let w_ij = alpha[i] * alpha[j] - a_inv[(i, j)];
            let factor = if i == j { 0.5 } else { 1.0 };
            let hg = kernels::kernel_hyper_grad(
                theta,
                family,
                history.points()[i].as_ref(),
                history.points()[j].as_ref(),
            )?;
            grad.sigma0_sq += factor * w_ij * hg.sigma0_sq;
            for (g, h) in grad.alpha_x.iter_mut().zip(hg.alpha_x.iter()) {
                *g += factor * w_ij * h;
            }
            for (g, h) in grad.alpha_w.iter_mut().zip(hg.alpha_w.iter()) {
                *g += factor * w_ij * h;
            }
            for (g, h) in grad.task.iter_mut().zip(hg.task.iter()) {
                *g += factor * w_ij * h;
            }
        }
    }
    grad.mu0 = alpha.sum();
    if theta.noise_var.is_some() && history.noise_vars().is_none() {
        grad.noise_var = 0.5 * (alpha.dot(alpha) - a_inv.trace());
    }
    Ok((value, grad))
}
