//! The induced posterior on the objective G: posterior mean a_n(x), its
//! variance, the measure-weighted kernel cross-covariances B(x, i), and the
//! one-step update scale sigma_tilde with gradients in both the evaluation
//! point and the candidate.

use crate::error::{BqoError, Result};
use crate::gp::PosteriorState;
use crate::kernels::{self, Env, EnvRef, KernelFamily, Point, PointRef};
use nalgebra::{DMatrix, DVector};

/// Weighting over the environmental variable w.
#[derive(Debug, Clone)]
pub enum Measure {
    /// Finite support with non-negative weights (not necessarily normalized).
    Finite {
        support: Vec<Env>,
        weights: Vec<f64>,
    },
    /// Product of independent Gaussian densities; closed forms require the
    /// squared exponential kernel.
    GaussianProduct { means: Vec<f64>, vars: Vec<f64> },
    /// User-supplied quadrature nodes and weights over continuous w.
    Nodes {
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

impl Measure {
    pub fn single_atom(w: Env) -> Self {
        Measure::Finite {
            support: vec![w],
            weights: vec![1.0],
        }
    }

    // Negated comparisons here also reject NaN, which `<=` would admit.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        match self {
            Measure::Finite { support, weights } => {
                if support.len() != weights.len() || support.is_empty() {
                    return Err(BqoError::InvalidConfig(
                        "finite measure: support/weights length mismatch".into(),
                    ));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || !weights.iter().any(|w| *w > 0.0) {
                    return Err(BqoError::InvalidConfig(
                        "finite measure weights must be non-negative with positive total".into(),
                    ));
                }
                Ok(())
            }
            Measure::GaussianProduct { means, vars } => {
                if means.len() != vars.len() {
                    return Err(BqoError::InvalidConfig(
                        "gaussian measure: means/vars length mismatch".into(),
                    ));
                }
                if vars.iter().any(|v| !(*v > 0.0)) {
                    return Err(BqoError::InvalidConfig(
                        "gaussian measure variances must be positive".into(),
                    ));
                }
                Ok(())
            }
            Measure::Nodes { points, weights } => {
                if points.len() != weights.len() || points.is_empty() {
                    return Err(BqoError::InvalidConfig(
                        "node measure: points/weights length mismatch".into(),
                    ));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || !weights.iter().any(|w| *w > 0.0) {
                    return Err(BqoError::InvalidConfig(
                        "node measure weights must be non-negative with positive total".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Total mass of the measure (1 for the Gaussian case).
    pub fn mass(&self) -> f64 {
        match self {
            Measure::Finite { weights, .. } | Measure::Nodes { weights, .. } => {
                weights.iter().sum()
            }
            Measure::GaussianProduct { .. } => 1.0,
        }
    }

    /// Number of atoms for discrete measures.
    pub fn num_atoms(&self) -> Option<usize> {
        match self {
            Measure::Finite { support, .. } => Some(support.len()),
            Measure::Nodes { points, .. } => Some(points.len()),
            Measure::GaussianProduct { .. } => None,
        }
    }

    fn for_each_atom(&self, mut f: impl FnMut(EnvRef<'_>, f64)) {
        match self {
            Measure::Finite { support, weights } => {
                for (env, w) in support.iter().zip(weights.iter()) {
                    f(env.as_ref(), *w);
                }
            }
            Measure::Nodes { points, weights } => {
                for (pt, w) in points.iter().zip(weights.iter()) {
                    f(EnvRef::Cont(pt), *w);
                }
            }
            Measure::GaussianProduct { .. } => unreachable!("gaussian measure has no atoms"),
        }
    }

    pub fn atom(&self, j: usize) -> EnvRef<'_> {
        match self {
            Measure::Finite { support, .. } => support[j].as_ref(),
            Measure::Nodes { points, .. } => EnvRef::Cont(&points[j]),
            Measure::GaussianProduct { .. } => unreachable!("gaussian measure has no atoms"),
        }
    }
}

/// One-dimensional Gaussian smoothing factor:
/// integral of exp(-alpha (w - t)^2) against the N(mu, var) density.
fn gauss_factor(alpha: f64, mu: f64, var: f64, t: f64) -> f64 {
    let denom = 1.0 + 2.0 * alpha * var;
    (-alpha * (t - mu) * (t - mu) / denom).exp() / denom.sqrt()
}

/// Derivative of `gauss_factor` with respect to t.
fn gauss_factor_dt(alpha: f64, mu: f64, var: f64, t: f64) -> f64 {
    let denom = 1.0 + 2.0 * alpha * var;
    gauss_factor(alpha, mu, var, t) * (-2.0 * alpha * (t - mu) / denom)
}

/// Posterior over the objective G induced by a Gaussian process on the
/// integrand and a measure over w. Immutable; reads are safe concurrently.
#[derive(Debug, Clone)]
pub struct QuadPosterior {
    state: PosteriorState,
    measure: Measure,
}

impl QuadPosterior {
    pub fn new(state: PosteriorState, measure: Measure) -> Result<Self> {
        measure.validate()?;
        match (&measure, state.family()) {
            (Measure::GaussianProduct { means, .. }, KernelFamily::SqExp) => {
                if means.len() != state.theta().alpha_w.len() {
                    return Err(BqoError::DimensionMismatch(
                        "gaussian measure dims do not match kernel w dims".into(),
                    ));
                }
            }
            (Measure::GaussianProduct { .. }, fam) => {
                return Err(BqoError::Unsupported(format!(
                    "gaussian-product measures need the squared exponential kernel, got {}",
                    fam.as_str()
                )));
            }
            _ => {}
        }
        Ok(QuadPosterior { state, measure })
    }

    pub fn state(&self) -> &PosteriorState {
        &self.state
    }

    pub fn measure(&self) -> &Measure {
        &self.measure
    }

    pub fn decision_dim(&self) -> usize {
        self.state.theta().alpha_x.len()
    }

    /// Dimension of candidate coordinates: decision coordinates plus the
    /// continuous environmental coordinates (task indices contribute none).
    pub fn cand_dim(&self) -> usize {
        self.decision_dim()
            + match self.state.family() {
                KernelFamily::TaskMatern52 => 0,
                _ => self.state.theta().alpha_w.len(),
            }
    }

    /// B(x, target): the measure-weighted cross covariance
    /// integral of Sigma_0((x, w), target) p(dw).
    pub fn b_point(&self, x: &[f64], target: PointRef) -> Result<f64> {
        match &self.measure {
            Measure::GaussianProduct { means, vars } => {
                let theta = self.state.theta();
                let EnvRef::Cont(tw) = target.w else {
                    return Err(BqoError::DimensionMismatch(
                        "gaussian measure with task-indexed target".into(),
                    ));
                };
                let mut v = theta.sigma0_sq;
                for ((al, xu), tu) in theta.alpha_x.iter().zip(x.iter()).zip(target.x.iter()) {
                    v *= (-al * (xu - tu) * (xu - tu)).exp();
                }
                for (k, al) in theta.alpha_w.iter().enumerate() {
                    v *= gauss_factor(*al, means[k], vars[k], tw[k]);
                }
                Ok(v)
            }
            _ => {
                let mut total = 0.0;
                let mut err = None;
                self.measure.for_each_atom(|env, wt| {
                    if err.is_some() || wt == 0.0 {
                        return;
                    }
                    let q = PointRef { x, w: env };
                    match kernels::kernel_eval(self.state.theta(), self.state.family(), q, target) {
                        Ok(v) => total += wt * v,
                        Err(e) => err = Some(e),
                    }
                });
                match err {
                    Some(e) => Err(e),
                    None => Ok(total),
                }
            }
        }
    }

    /// Gradient of B(x, target) with respect to the decision vector x.
    pub fn b_grad_x(&self, x: &[f64], target: PointRef) -> Result<Vec<f64>> {
        match &self.measure {
            Measure::GaussianProduct { .. } => {
                let theta = self.state.theta();
                let b = self.b_point(x, target)?;
                Ok(theta
                    .alpha_x
                    .iter()
                    .zip(x.iter().zip(target.x.iter()))
                    .map(|(al, (xu, tu))| -2.0 * al * (xu - tu) * b)
                    .collect())
            }
            _ => {
                let d = x.len();
                let mut g = vec![0.0; d];
                let mut err = None;
                self.measure.for_each_atom(|env, wt| {
                    if err.is_some() || wt == 0.0 {
                        return;
                    }
                    let q = PointRef { x, w: env };
                    match kernels::kernel_grad(self.state.theta(), self.state.family(), q, target) {
                        Ok(kg) => {
                            for j in 0..d {
                                g[j] += wt * kg[j];
                            }
                        }
                        Err(e) => err = Some(e),
                    }
                });
                match err {
                    Some(e) => Err(e),
                    None => Ok(g),
                }
            }
        }
    }

    /// Gradient of B(x, target) with respect to the target's free
    /// coordinates (decision part, then continuous environmental part).
    pub fn b_grad_target(&self, x: &[f64], target: PointRef) -> Result<Vec<f64>> {
        match &self.measure {
            Measure::GaussianProduct { means, vars } => {
                let theta = self.state.theta();
                let EnvRef::Cont(tw) = target.w else {
                    return Err(BqoError::DimensionMismatch(
                        "gaussian measure with task-indexed target".into(),
                    ));
                };
                let b = self.b_point(x, target)?;
                let mut g = Vec::with_capacity(target.x.len() + tw.len());
                for (al, (tu, xu)) in theta.alpha_x.iter().zip(target.x.iter().zip(x.iter())) {
                    g.push(-2.0 * al * (tu - xu) * b);
                }
                for (k, al) in theta.alpha_w.iter().enumerate() {
                    let f = gauss_factor(*al, means[k], vars[k], tw[k]);
                    if f > 0.0 {
                        g.push(b * gauss_factor_dt(*al, means[k], vars[k], tw[k]) / f);
                    } else {
                        g.push(0.0);
                    }
                }
                Ok(g)
            }
            _ => {
                let dims = match target.w {
                    EnvRef::Cont(tw) => target.x.len() + tw.len(),
                    EnvRef::Task(_) => target.x.len(),
                };
                let mut g = vec![0.0; dims];
                let mut err = None;
                self.measure.for_each_atom(|env, wt| {
                    if err.is_some() || wt == 0.0 {
                        return;
                    }
                    let q = PointRef { x, w: env };
                    // Gradient in the target's coordinates via symmetry.
                    match kernels::kernel_grad(self.state.theta(), self.state.family(), target, q) {
                        Ok(kg) => {
                            for (gj, kj) in g.iter_mut().zip(kg.iter()) {
                                *gj += wt * kj;
                            }
                        }
                        Err(e) => err = Some(e),
                    }
                });
                match err {
                    Some(e) => Err(e),
                    None => Ok(g),
                }
            }
        }
    }

    /// B(x, i) against every history point.
    pub fn b_vec(&self, x: &[f64]) -> Result<DVector<f64>> {
        let n = self.state.len();
        let mut b = DVector::zeros(n);
        for i in 0..n {
            b[i] = self.b_point(x, self.state.history().points()[i].as_ref())?;
        }
        Ok(b)
    }

    /// Jacobian of b_vec with respect to x (n rows, d columns).
    fn b_vec_jac(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.state.len();
        let d = x.len();
        let mut jac = DMatrix::zeros(n, d);
        for i in 0..n {
            let g = self.b_grad_x(x, self.state.history().points()[i].as_ref())?;
            for j in 0..d {
                jac[(i, j)] = g[j];
            }
        }
        Ok(jac)
    }

    /// Posterior mean of G at x.
    pub fn a(&self, x: &[f64]) -> Result<f64> {
        let b = self.b_vec(x)?;
        Ok(self.a_from_b(&b))
    }

    /// Posterior mean of G from a precomputed B vector.
    pub fn a_from_b(&self, b: &DVector<f64>) -> f64 {
        self.state.theta().mu0 * self.measure.mass() + b.dot(self.state.resid_solve())
    }

    /// Gradient of the posterior mean of G.
    pub fn a_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let jac = self.b_vec_jac(x)?;
        let g = jac.transpose() * self.state.resid_solve();
        Ok(g.iter().copied().collect())
    }

    /// Posterior variance of G at x, clamped at the numerical tolerance.
    pub fn var_g(&self, x: &[f64]) -> Result<f64> {
        let prior = match &self.measure {
            Measure::GaussianProduct { vars, .. } => {
                let theta = self.state.theta();
                let mut v = theta.sigma0_sq;
                for (al, s2) in theta.alpha_w.iter().zip(vars.iter()) {
                    // E[exp(-alpha (W - W')^2)] for independent W, W'.
                    v /= (1.0 + 4.0 * al * s2).sqrt();
                }
                v
            }
            _ => {
                let mut total = 0.0;
                let mut err = None;
                self.measure.for_each_atom(|wi, pi| {
                    if err.is_some() {
                        return;
                    }
                    self.measure.for_each_atom(|wj, pj| {
                        if err.is_some() {
                            return;
                        }
                        let qi = PointRef { x, w: wi };
                        let qj = PointRef { x, w: wj };
                        match kernels::kernel_eval(self.state.theta(), self.state.family(), qi, qj)
                        {
                            Ok(v) => total += pi * pj * v,
                            Err(e) => err = Some(e),
                        }
                    });
                });
                if let Some(e) = err {
                    return Err(e);
                }
                total
            }
        };
        let b = self.b_vec(x)?;
        let v = prior - b.dot(&self.state.solve(&b));
        if v < -1e-8 * self.state.diag_scale() {
            return Err(BqoError::NumericalConsistency(format!(
                "Var[G] = {v:.3e} below tolerance"
            )));
        }
        Ok(v.max(0.0))
    }

    /// Cross-check identity for discrete measures: the posterior mean of G
    /// as the weighted sum of integrand posterior means.
    pub fn a_by_mean_sum(&self, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        let mut err = None;
        self.measure.for_each_atom(|env, wt| {
            if err.is_some() {
                return;
            }
            match self.state.posterior_mean(PointRef { x, w: env }) {
                Ok(m) => total += wt * m,
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(total),
        }
    }

    /// Prepare a candidate (x_{n+1}, w_{n+1}) for sigma_tilde queries.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN lambda
    pub fn candidate(&self, cand: &Point, lambda: f64) -> Result<CandidateCtx<'_>> {
        if !(lambda >= 0.0) {
            return Err(BqoError::InvalidConfig(
                "candidate noise variance must be >= 0".into(),
            ));
        }
        let state = &self.state;
        let gamma = state.k_vec(cand.as_ref())?;
        let v = state.solve(&gamma);
        let prior_cc =
            kernels::kernel_eval(state.theta(), state.family(), cand.as_ref(), cand.as_ref())?;
        let denom_sq = prior_cc - gamma.dot(&v) + lambda;
        let scale = state.diag_scale();
        if denom_sq < -1e-8 * scale {
            return Err(BqoError::NumericalConsistency(format!(
                "sigma_tilde denominator {denom_sq:.3e} below tolerance"
            )));
        }
        // The update scale is identically zero when a noiseless candidate
        // repeats a noiseless observation; a small band around zero treats
        // nearly-duplicate candidates the same way.
        let mut degenerate = denom_sq < 1e-12 * scale;
        if lambda == 0.0 {
            let hist = state.history();
            for (i, p) in hist.points().iter().enumerate() {
                if p == cand && hist.is_noiseless_at(i, state.theta()) {
                    degenerate = true;
                    break;
                }
            }
        }
        let n = state.len();
        let cd = self.cand_dim();
        let mut jgamma = DMatrix::zeros(cd, n);
        if !degenerate {
            for i in 0..n {
                let g = kernels::kernel_grad(
                    state.theta(),
                    state.family(),
                    cand.as_ref(),
                    state.history().points()[i].as_ref(),
                )?;
                for r in 0..cd {
                    jgamma[(r, i)] = g[r];
                }
            }
        }
        let beta4 = 2.0 * (&jgamma * &v);
        Ok(CandidateCtx {
            qp: self,
            cand: cand.clone(),
            lambda,
            v,
            denom: if degenerate {
                0.0
            } else {
                denom_sq.max(0.0).sqrt()
            },
            degenerate,
            jgamma,
            beta4,
        })
    }

    /// sigma_tilde at a single (x, candidate) pair.
    pub fn sigma_tilde(&self, x: &[f64], cand: &Point, lambda: f64) -> Result<f64> {
        self.candidate(cand, lambda)?.sigma(x)
    }
}

/// Precomputed candidate quantities shared across evaluation points:
/// gamma = Sigma_0(cand, history), its solve against A_n, the denominator,
/// and the candidate-coordinate Jacobian of gamma.
pub struct CandidateCtx<'a> {
    qp: &'a QuadPosterior,
    cand: Point,
    lambda: f64,
    v: DVector<f64>,
    denom: f64,
    degenerate: bool,
    jgamma: DMatrix<f64>,
    beta4: DVector<f64>,
}

impl<'a> CandidateCtx<'a> {
    pub fn qp(&self) -> &QuadPosterior {
        self.qp
    }

    pub fn cand(&self) -> &Point {
        &self.cand
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// True when the indicator (or the numerical guard band) forces the
    /// update scale to zero.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    fn beta2(&self, b_x: &DVector<f64>, b_cand: f64) -> f64 {
        b_cand - b_x.dot(&self.v)
    }

    /// Signed update scale sigma_tilde(x, cand).
    pub fn sigma(&self, x: &[f64]) -> Result<f64> {
        if self.degenerate {
            return Ok(0.0);
        }
        let b_x = self.qp.b_vec(x)?;
        let b_cand = self.qp.b_point(x, self.cand.as_ref())?;
        Ok(self.beta2(&b_x, b_cand) / self.denom)
    }

    /// sigma_tilde from a precomputed B vector at x and B(x, cand).
    pub fn sigma_from_parts(&self, b_x: &DVector<f64>, b_cand: f64) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        self.beta2(b_x, b_cand) / self.denom
    }

    /// Posterior mean of G and sigma_tilde at x, sharing the B vector.
    pub fn a_and_sigma(&self, x: &[f64]) -> Result<(f64, f64)> {
        let b_x = self.qp.b_vec(x)?;
        let a = self.qp.state().theta().mu0 * self.qp.measure().mass()
            + b_x.dot(self.qp.state().resid_solve());
        if self.degenerate {
            return Ok((a, 0.0));
        }
        let b_cand = self.qp.b_point(x, self.cand.as_ref())?;
        Ok((a, self.beta2(&b_x, b_cand) / self.denom))
    }

    /// Value and x-gradient of a_n(x) + sigma_tilde(x, cand) * z, the inner
    /// objective of the one-draw value of information.
    pub fn inner_value_grad(&self, x: &[f64], z: f64) -> Result<(f64, Vec<f64>)> {
        let state = self.qp.state();
        let b_x = self.qp.b_vec(x)?;
        let jac = self.qp.b_vec_jac(x)?;
        let a = state.theta().mu0 * self.qp.measure().mass() + b_x.dot(state.resid_solve());
        let a_grad = jac.transpose() * state.resid_solve();
        if self.degenerate || z == 0.0 {
            let sigma = if self.degenerate {
                0.0
            } else {
                self.beta2(&b_x, self.qp.b_point(x, self.cand.as_ref())?) / self.denom
            };
            return Ok((a + sigma * z, a_grad.iter().copied().collect()));
        }
        let b_cand = self.qp.b_point(x, self.cand.as_ref())?;
        let db_cand = self.qp.b_grad_x(x, self.cand.as_ref())?;
        let sigma = self.beta2(&b_x, b_cand) / self.denom;
        let jtv = jac.transpose() * &self.v;
        let value = a + sigma * z;
        let grad: Vec<f64> = (0..x.len())
            .map(|j| a_grad[j] + z * (db_cand[j] - jtv[j]) / self.denom)
            .collect();
        Ok((value, grad))
    }

    /// Gradient of sigma_tilde(x, cand) with respect to the candidate's
    /// free coordinates, assembled from the factorized pieces: the inverse
    /// denominator, the numerator, the candidate-Jacobian terms, and the
    /// (identically zero for stationary kernels) self-covariance gradient.
    pub fn sigma_grad_cand(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.degenerate {
            return Ok(vec![0.0; self.jgamma.nrows()]);
        }
        let b_x = self.qp.b_vec(x)?;
        let b_cand = self.qp.b_point(x, self.cand.as_ref())?;
        let beta2 = self.beta2(&b_x, b_cand);
        let grad_b_cand = self.qp.b_grad_target(x, self.cand.as_ref())?;
        let u = self.qp.state().solve(&b_x);
        let jg_u = &self.jgamma * &u;
        let inv = 1.0 / self.denom;
        let inv3 = inv * inv * inv;
        Ok((0..self.jgamma.nrows())
            .map(|r| {
                let beta3 = grad_b_cand[r] - jg_u[r];
                beta3 * inv + 0.5 * beta2 * self.beta4[r] * inv3
            })
            .collect())
    }
}

/// A wrapper produced by the change of variables to a standard Gaussian
/// product measure: maps standard normal coordinates y to environmental
/// values w via the marginal inverse CDFs.
pub struct Reparameterized {
    inv_cdfs: Vec<Box<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl Reparameterized {
    pub fn measure(&self) -> Measure {
        Measure::GaussianProduct {
            means: vec![0.0; self.inv_cdfs.len()],
            vars: vec![1.0; self.inv_cdfs.len()],
        }
    }

    /// w_i = F_i^{-1}(Phi(y_i)).
    pub fn map(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.inv_cdfs.len());
        y.iter()
            .zip(self.inv_cdfs.iter())
            .map(|(yi, f)| f(crate::normal::cdf(*yi)))
            .collect()
    }
}

/// Change of variables to a standard Gaussian product measure for
/// independent marginals. Spot-checks each inverse CDF for monotonicity.
pub fn gaussian_reparameterize(
    inv_cdfs: Vec<Box<dyn Fn(f64) -> f64 + Send + Sync>>,
) -> Result<Reparameterized> {
    for (i, f) in inv_cdfs.iter().enumerate() {
        let mut prev = f64::NEG_INFINITY;
        for k in 1..40 {
            let u = k as f64 / 40.0;
            let v = f(u);
            if !v.is_finite() || v < prev {
                return Err(BqoError::InvalidMarginal(format!(
                    "inverse CDF {i} is not monotone near u = {u}"
                )));
            }
            prev = v;
        }
    }
    Ok(Reparameterized { inv_cdfs })
}
