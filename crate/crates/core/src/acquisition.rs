//! Value of information for one more integrand observation, computed two
//! ways: a discretization-free Monte Carlo scheme with unbiased stochastic
//! gradients, and an exact computation over a finite discretization of the
//! decision set. Expected improvement and knowledge gradient baselines sit
//! on the same machinery.

use crate::error::{BqoError, Result};
use crate::kernels::Point;
use crate::normal::{self, pairwise_sum};
use crate::quadrature::{CandidateCtx, Measure, QuadPosterior};
use rand::RngExt;
use rand_distr::StandardNormal;

/// Exactly matching slopes are merged before breakpoint computation; the
/// breakpoint division blows up otherwise.
const SLOPE_MERGE_TOL: f64 = 1e-12;

/// One stochastic draw of the value of information and its gradient at a
/// candidate.
#[derive(Debug, Clone)]
pub struct VoiSample {
    /// One-draw contribution max_x(a + sigma z) - max_x a.
    pub value: f64,
    /// Envelope-theorem gradient in the candidate's free coordinates.
    pub grad: Vec<f64>,
    /// The decision vector achieving the inner maximum for this draw.
    pub inner_argmax: Vec<f64>,
}

/// Result of the exact epigraph computation of E[max_i(a_i + b_i Z)] - max a.
#[derive(Debug, Clone)]
pub struct HResult {
    pub value: f64,
    /// Indices of the lines forming the upper envelope, in increasing
    /// slope order.
    pub kept: Vec<usize>,
    /// Z-locations where the envelope switches lines (length kept - 1).
    pub breakpoints: Vec<f64>,
}

/// E[max_i (a_i + b_i Z)] - max_i a_i for standard normal Z, via the upper
/// envelope of the lines z -> a_i + b_i z. Ties in slope keep the larger
/// intercept.
pub fn h_exact(a: &[f64], b: &[f64]) -> Result<HResult> {
    if a.is_empty() || a.len() != b.len() {
        return Err(BqoError::InvalidConfig(format!(
            "h_exact needs equal-length nonempty vectors, got {}/{}",
            a.len(),
            b.len()
        )));
    }
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| {
        b[i].partial_cmp(&b[j])
            .unwrap()
            .then(a[i].partial_cmp(&a[j]).unwrap())
    });
    // Merge near-equal slopes keeping the largest intercept (last in order).
    let mut merged: Vec<usize> = Vec::with_capacity(order.len());
    for idx in order {
        if let Some(&last) = merged.last() {
            if (b[idx] - b[last]).abs() < SLOPE_MERGE_TOL {
                if a[idx] >= a[last] {
                    *merged.last_mut().unwrap() = idx;
                }
                continue;
            }
        }
        merged.push(idx);
    }
    // Upper-envelope sweep over lines sorted by increasing slope.
    let mut kept: Vec<usize> = Vec::with_capacity(merged.len());
    let mut breaks: Vec<f64> = Vec::new();
    for idx in merged {
        loop {
            match kept.last() {
                None => break,
                Some(&top) => {
                    // The incoming line overtakes `top` at z_cross.
                    let z_cross = (a[top] - a[idx]) / (b[idx] - b[top]);
                    let left = if breaks.is_empty() {
                        f64::NEG_INFINITY
                    } else {
                        breaks[breaks.len() - 1]
                    };
                    if z_cross <= left {
                        kept.pop();
                        breaks.pop();
                    } else {
                        breaks.push(z_cross);
                        break;
                    }
                }
            }
        }
        kept.push(idx);
    }
    let mut value = 0.0;
    for i in 0..kept.len().saturating_sub(1) {
        let dr = b[kept[i + 1]] - b[kept[i]];
        value += dr * normal::excess(-breaks[i].abs());
    }
    Ok(HResult {
        value,
        kept,
        breakpoints: breaks,
    })
}

/// Closed form of h for exactly two lines; used as an independent check.
pub fn two_line_h(a1: f64, b1: f64, a2: f64, b2: f64) -> f64 {
    let db = (b2 - b1).abs();
    if db < SLOPE_MERGE_TOL {
        return 0.0;
    }
    db * normal::excess(-((a2 - a1).abs() / db))
}

/// Finite decision grid with the posterior values and candidate-specific
/// update slopes evaluated on it.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub points: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Discretization {
    /// Evaluate a_n and sigma_tilde(., cand) on a fixed grid.
    pub fn build(ctx: &CandidateCtx<'_>, points: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(BqoError::InvalidConfig(
                "discretization needs at least one point".into(),
            ));
        }
        let mut a = Vec::with_capacity(points.len());
        let mut b = Vec::with_capacity(points.len());
        for x in points {
            let (ax, sx) = ctx.a_and_sigma(x)?;
            a.push(ax);
            b.push(sx);
        }
        Ok(Discretization {
            points: points.to_vec(),
            a,
            b,
        })
    }
}

/// Value of information on a discretization, with its gradient in the
/// candidate coordinates. The gradient accumulates phi at each envelope
/// breakpoint against the difference of adjacent slope gradients.
pub fn voi_discretized(ctx: &CandidateCtx<'_>, disc: &Discretization) -> Result<(f64, Vec<f64>)> {
    let dims = ctx.qp().cand_dim();
    if ctx.is_degenerate() {
        return Ok((0.0, vec![0.0; dims]));
    }
    let h = h_exact(&disc.a, &disc.b)?;
    if h.kept.len() <= 1 {
        return Ok((0.0, vec![0.0; dims]));
    }
    let mut grad = vec![0.0; dims];
    let mut slope_grads: Vec<Option<Vec<f64>>> = vec![None; disc.points.len()];
    for i in 0..h.kept.len() - 1 {
        let lo = h.kept[i];
        let hi = h.kept[i + 1];
        let phi = normal::pdf(h.breakpoints[i].abs());
        for (idx, sign) in [(hi, 1.0), (lo, -1.0)] {
            if slope_grads[idx].is_none() {
                slope_grads[idx] = Some(ctx.sigma_grad_cand(&disc.points[idx])?);
            }
            let g = slope_grads[idx].as_ref().unwrap();
            for (gj, gv) in grad.iter_mut().zip(g.iter()) {
                *gj += sign * phi * gv;
            }
        }
    }
    Ok((h.value, grad))
}

/// Value-only variant skipping gradient assembly.
pub fn voi_discretized_value(ctx: &CandidateCtx<'_>, disc: &Discretization) -> Result<f64> {
    if ctx.is_degenerate() {
        return Ok(0.0);
    }
    Ok(h_exact(&disc.a, &disc.b)?.value)
}

/// Solver for the inner problem max_{x in A} a_n(x) + sigma_tilde(x, cand) z.
pub trait InnerMax: Sync {
    /// Maximize the inner objective; `ctx` is None for the base problem
    /// max a_n (equivalently z = 0).
    fn argmax(
        &self,
        qp: &QuadPosterior,
        ctx: Option<&CandidateCtx<'_>>,
        z: f64,
        rng: &mut dyn rand::Rng,
    ) -> Result<Vec<f64>>;
}

/// Evaluates the value of information and its stochastic gradients for one
/// posterior (one hyperparameter draw). The candidate-independent base
/// level max_x a_n(x) is computed once up front.
pub struct VoiEvaluator<'a> {
    qp: &'a QuadPosterior,
    inner: &'a dyn InnerMax,
    lambda: f64,
    base_argmax: Vec<f64>,
    base_value: f64,
}

impl<'a> VoiEvaluator<'a> {
    pub fn new(
        qp: &'a QuadPosterior,
        inner: &'a dyn InnerMax,
        lambda: f64,
        rng: &mut dyn rand::Rng,
    ) -> Result<Self> {
        let base_argmax = inner.argmax(qp, None, 0.0, rng)?;
        let base_value = qp.a(&base_argmax)?;
        Ok(VoiEvaluator {
            qp,
            inner,
            lambda,
            base_argmax,
            base_value,
        })
    }

    pub fn qp(&self) -> &QuadPosterior {
        self.qp
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn base_value(&self) -> f64 {
        self.base_value
    }

    pub fn base_argmax(&self) -> &[f64] {
        &self.base_argmax
    }

    pub fn candidate(&self, cand: &Point) -> Result<CandidateCtx<'a>> {
        self.qp.candidate(cand, self.lambda)
    }

    /// Monte Carlo estimate of the value of information with m draws.
    /// Deterministic given the generator state. Draws whose inner solve
    /// fails to produce a finite value are excluded; more than 10% of them
    /// is an error.
    pub fn voi_mc(&self, cand: &Point, m: usize, rng: &mut dyn rand::Rng) -> Result<f64> {
        if m == 0 {
            return Err(BqoError::InvalidConfig("voi_mc needs m >= 1".into()));
        }
        let ctx = self.candidate(cand)?;
        if ctx.is_degenerate() {
            return Ok(0.0);
        }
        let mut vals = Vec::with_capacity(m);
        let mut flagged = 0usize;
        for _ in 0..m {
            let z: f64 = rng.sample(StandardNormal);
            let y = self.inner.argmax(self.qp, Some(&ctx), z, rng)?;
            let (a, s) = ctx.a_and_sigma(&y)?;
            let v = a + s * z - self.base_value;
            if v.is_finite() {
                vals.push(v);
            } else {
                flagged += 1;
            }
        }
        if flagged * 10 > m {
            return Err(BqoError::OptimizationFailure(format!(
                "{flagged}/{m} inner solves produced non-finite increments"
            )));
        }
        if vals.is_empty() {
            return Err(BqoError::OptimizationFailure(
                "all inner solves failed".into(),
            ));
        }
        Ok(pairwise_sum(&vals) / vals.len() as f64)
    }

    /// Monte Carlo estimate over an explicit decision grid, with the inner
    /// maxima taken exactly over the grid. The posterior values and update
    /// slopes are evaluated once, so large draw counts stay cheap. Returns
    /// the estimate and its standard error.
    pub fn voi_mc_on_grid(
        &self,
        cand: &Point,
        points: &[Vec<f64>],
        m: usize,
        rng: &mut dyn rand::Rng,
    ) -> Result<(f64, f64)> {
        if m < 2 {
            return Err(BqoError::InvalidConfig(
                "voi_mc_on_grid needs m >= 2".into(),
            ));
        }
        let ctx = self.candidate(cand)?;
        if ctx.is_degenerate() {
            return Ok((0.0, 0.0));
        }
        let disc = Discretization::build(&ctx, points)?;
        let base = disc.a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut vals = Vec::with_capacity(m);
        for _ in 0..m {
            let z: f64 = rng.sample(StandardNormal);
            let best = disc
                .a
                .iter()
                .zip(disc.b.iter())
                .map(|(a, b)| a + b * z)
                .fold(f64::NEG_INFINITY, f64::max);
            vals.push(best - base);
        }
        Ok(crate::normal::mean_se(&vals))
    }

    /// One draw of the stochastic gradient: grad sigma_tilde(y, cand) * Z
    /// at the inner argmax y, per the envelope theorem.
    pub fn grad_sample(&self, cand: &Point, rng: &mut dyn rand::Rng) -> Result<VoiSample> {
        let ctx = self.candidate(cand)?;
        self.grad_sample_ctx(&ctx, rng)
    }

    pub fn grad_sample_ctx(
        &self,
        ctx: &CandidateCtx<'_>,
        rng: &mut dyn rand::Rng,
    ) -> Result<VoiSample> {
        let dims = self.qp.cand_dim();
        if ctx.is_degenerate() {
            return Ok(VoiSample {
                value: 0.0,
                grad: vec![0.0; dims],
                inner_argmax: self.base_argmax.clone(),
            });
        }
        let z: f64 = rng.sample(StandardNormal);
        let y = self.inner.argmax(self.qp, Some(ctx), z, rng)?;
        let (a, s) = ctx.a_and_sigma(&y)?;
        let grad = if z == 0.0 {
            vec![0.0; dims]
        } else {
            ctx.sigma_grad_cand(&y)?
                .into_iter()
                .map(|g| g * z)
                .collect()
        };
        Ok(VoiSample {
            value: a + s * z - self.base_value,
            grad,
            inner_argmax: y,
        })
    }
}

/// Largest posterior objective mean over the decision vectors already in
/// the history (the incumbent of the expected improvement criterion).
pub fn incumbent(qp: &QuadPosterior) -> Result<f64> {
    let hist = qp.state().history();
    if hist.is_empty() {
        return Err(BqoError::InvalidConfig(
            "incumbent needs a nonempty history".into(),
        ));
    }
    let mut best = f64::NEG_INFINITY;
    for p in hist.points() {
        best = best.max(qp.a(&p.x)?);
    }
    Ok(best)
}

/// Expected improvement of the posterior on G over the incumbent.
pub fn ei(qp: &QuadPosterior, x: &[f64]) -> Result<f64> {
    let inc = incumbent(qp)?;
    let a = qp.a(x)?;
    let var = qp.var_g(x)?;
    // Variances inside the posterior tolerance band count as zero; jitter
    // alone leaves a floor of about 1e-10 times the scale.
    if var <= 1e-8 * qp.state().diag_scale() {
        return Ok((a - inc).max(0.0));
    }
    let sd = var.sqrt();
    let z = (a - inc) / sd;
    Ok(((a - inc) * normal::cdf(z) + sd * normal::pdf(z)).max(0.0))
}

/// Expected improvement and its gradient in x (discrete measures only;
/// the variance gradient runs over atom pairs).
pub fn ei_with_grad(qp: &QuadPosterior, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let measure = qp.measure();
    let n_atoms = measure.num_atoms().ok_or_else(|| {
        BqoError::Unsupported("expected improvement gradients need a discrete measure".into())
    })?;
    let inc = incumbent(qp)?;
    let a = qp.a(x)?;
    let a_grad = qp.a_grad(x)?;
    let var = qp.var_g(x)?;
    if var <= 1e-8 * qp.state().diag_scale() {
        let v = (a - inc).max(0.0);
        let g = if a > inc { a_grad } else { vec![0.0; x.len()] };
        return Ok((v, g));
    }
    let sd = var.sqrt();
    // d Var / dx via the atom-pair expansion of Cov_n.
    let state = qp.state();
    let weights: Vec<f64> = (0..n_atoms)
        .map(|j| match measure {
            Measure::Finite { weights, .. } | Measure::Nodes { weights, .. } => weights[j],
            Measure::GaussianProduct { .. } => unreachable!(),
        })
        .collect();
    let mut dvar = vec![0.0; x.len()];
    let n = state.len();
    let mut kmat = nalgebra::DMatrix::zeros(n, n_atoms);
    for j in 0..n_atoms {
        let q = crate::kernels::PointRef {
            x,
            w: measure.atom(j),
        };
        let kv = state.k_vec(q)?;
        kmat.set_column(j, &kv);
    }
    let solved = state.solve_matrix(&kmat);
    for i in 0..n_atoms {
        let qi = crate::kernels::PointRef {
            x,
            w: measure.atom(i),
        };
        for j in 0..n_atoms {
            let qj = crate::kernels::PointRef {
                x,
                w: measure.atom(j),
            };
            let pij = weights[i] * weights[j];
            if pij == 0.0 {
                continue;
            }
            // Prior term: both arguments move with x.
            let g1 = crate::kernels::kernel_grad(state.theta(), state.family(), qi, qj)?;
            let g2 = crate::kernels::kernel_grad(state.theta(), state.family(), qj, qi)?;
            for r in 0..x.len() {
                dvar[r] += pij * (g1[r] + g2[r]);
            }
            // Correction term: -2 (d k_i / dx)^T A^{-1} k_j, symmetrized
            // over (i, j) by the double loop.
            for (l, p) in state.history().points().iter().enumerate() {
                let dk =
                    crate::kernels::kernel_grad(state.theta(), state.family(), qi, p.as_ref())?;
                for r in 0..x.len() {
                    dvar[r] -= 2.0 * pij * dk[r] * solved[(l, j)];
                }
            }
        }
    }
    let z = (a - inc) / sd;
    let cdf = normal::cdf(z);
    let pdf = normal::pdf(z);
    let value = ((a - inc) * cdf + sd * pdf).max(0.0);
    // dEI = Phi(z) da + phi(z) d sd, with d sd = d var / (2 sd).
    let grad: Vec<f64> = (0..x.len())
        .map(|r| cdf * a_grad[r] + pdf * dvar[r] / (2.0 * sd))
        .collect();
    Ok((value, grad))
}

/// Knowledge gradient at a decision vector: the value of information of the
/// degenerate problem whose measure is a single unit-weight atom, evaluated
/// at the candidate (x, atom).
pub fn kg_value_mc(
    eval: &VoiEvaluator<'_>,
    x: &[f64],
    m: usize,
    rng: &mut dyn rand::Rng,
) -> Result<f64> {
    let cand = kg_candidate(eval.qp(), x)?;
    eval.voi_mc(&cand, m, rng)
}

/// The candidate point a knowledge-gradient query at x corresponds to.
pub fn kg_candidate(qp: &QuadPosterior, x: &[f64]) -> Result<Point> {
    match qp.measure() {
        Measure::Finite { support, weights }
            if support.len() == 1 && (weights[0] - 1.0).abs() < 1e-15 =>
        {
            Ok(Point {
                x: x.to_vec(),
                w: support[0].clone(),
            })
        }
        _ => Err(BqoError::Unsupported(
            "knowledge gradient needs a single unit-weight atom measure".into(),
        )),
    }
}
