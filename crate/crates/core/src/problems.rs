//! Reproducible benchmark problems: the analytic test problem, the Branin
//! composition over a 12-atom environmental distribution, and problems
//! simulated from Gaussian process priors. Each exposes the integrand
//! sampler, the measure over w, domain descriptors, and (when available)
//! the exact objective for scoring.

use crate::error::{BqoError, Result};
use crate::kernels::{Env, EnvRef, HyperParams, KernelFamily};
use crate::quadrature::Measure;
use nalgebra::DMatrix;
use rand::RngExt;
use rand_distr::StandardNormal;

/// The decision set A: a box or an explicit finite collection.
#[derive(Debug, Clone)]
pub enum DecisionDomain {
    Box(Vec<(f64, f64)>),
    Finite(Vec<Vec<f64>>),
}

impl DecisionDomain {
    pub fn dim(&self) -> usize {
        match self {
            DecisionDomain::Box(b) => b.len(),
            DecisionDomain::Finite(pts) => pts[0].len(),
        }
    }

    pub fn sample_uniform(&self, rng: &mut dyn rand::Rng) -> Vec<f64> {
        match self {
            DecisionDomain::Box(b) => b
                .iter()
                .map(|(lo, hi)| rng.random_range(*lo..*hi))
                .collect(),
            DecisionDomain::Finite(pts) => pts[rng.random_range(0..pts.len())].clone(),
        }
    }

    pub fn clamp(&self, x: &mut [f64]) {
        if let DecisionDomain::Box(b) = self {
            for (xi, (lo, hi)) in x.iter_mut().zip(b.iter()) {
                *xi = xi.clamp(*lo, *hi);
            }
        }
    }
}

/// The environmental set W: a box for continuous w, or a finite collection
/// (continuous atoms or task indices).
#[derive(Debug, Clone)]
pub enum WDomain {
    Box(Vec<(f64, f64)>),
    Finite(Vec<Env>),
}

impl WDomain {
    pub fn sample_uniform(&self, rng: &mut dyn rand::Rng) -> Env {
        match self {
            WDomain::Box(b) => Env::Cont(
                b.iter()
                    .map(|(lo, hi)| rng.random_range(*lo..*hi))
                    .collect(),
            ),
            WDomain::Finite(envs) => envs[rng.random_range(0..envs.len())].clone(),
        }
    }
}

/// Draw one environmental value from the measure (for observing the
/// objective directly, as the baseline algorithms do).
pub fn sample_env(measure: &Measure, rng: &mut dyn rand::Rng) -> Env {
    match measure {
        Measure::Finite { support, weights } => {
            let total: f64 = weights.iter().sum();
            let mut u = rng.random_range(0.0..total);
            for (env, w) in support.iter().zip(weights.iter()) {
                if u < *w {
                    return env.clone();
                }
                u -= w;
            }
            support.last().unwrap().clone()
        }
        Measure::Nodes { points, weights } => {
            let total: f64 = weights.iter().sum();
            let mut u = rng.random_range(0.0..total);
            for (pt, w) in points.iter().zip(weights.iter()) {
                if u < *w {
                    return Env::Cont(pt.clone());
                }
                u -= w;
            }
            Env::Cont(points.last().unwrap().clone())
        }
        Measure::GaussianProduct { means, vars } => Env::Cont(
            means
                .iter()
                .zip(vars.iter())
                .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        ),
    }
}

pub type SampleF =
    Box<dyn Fn(&[f64], EnvRef<'_>, &mut dyn rand::Rng) -> Result<(f64, Option<f64>)> + Send + Sync>;
pub type SampleG =
    Box<dyn Fn(&[f64], &mut dyn rand::Rng) -> Result<(f64, Option<f64>)> + Send + Sync>;
pub type TrueG = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A benchmark problem: integrand sampler, measure, domains, kernel
/// recommendation, hyperparameter templates, and optional exact objective.
pub struct Problem {
    pub name: String,
    pub domain: DecisionDomain,
    pub w_domain: WDomain,
    pub measure: Measure,
    pub family: KernelFamily,
    /// Template (shape and initial values) for the process on the integrand.
    pub theta_f: HyperParams,
    /// Template for the process the baselines place directly on G.
    pub theta_g: HyperParams,
    sample_f: SampleF,
    sample_g: SampleG,
    pub true_g: Option<TrueG>,
}

impl Problem {
    /// Noisy observation of the integrand at (x, w); the second element is
    /// the observation's noise variance when the problem reports it.
    pub fn sample_f(
        &self,
        x: &[f64],
        w: EnvRef<'_>,
        rng: &mut dyn rand::Rng,
    ) -> Result<(f64, Option<f64>)> {
        (self.sample_f)(x, w, rng)
    }

    /// Noisy observation of the objective at x (for the EI/KG baselines).
    pub fn sample_g(&self, x: &[f64], rng: &mut dyn rand::Rng) -> Result<(f64, Option<f64>)> {
        (self.sample_g)(x, rng)
    }

    pub fn true_g(&self, x: &[f64]) -> Option<f64> {
        self.true_g.as_ref().map(|f| f(x))
    }

    /// Swap in a different integrand sampler (test instrumentation).
    pub fn set_sample_f(&mut self, f: SampleF) {
        self.sample_f = f;
    }

    /// Swap in a different objective sampler (test instrumentation).
    pub fn set_sample_g(&mut self, g: SampleG) {
        self.sample_g = g;
    }
}

/// The analytic test problem: maximize E[z x^2 + w] over x in [-1/2, 1/2]
/// with w ~ N(0, 1) and z ~ N(-1, 1). The integrand conditional mean is
/// F(x, w) = -x^2 + w with observation noise variance x^4, and the exact
/// objective is G(x) = -x^2.
///
/// `known_noise` attaches the exact per-observation variances; otherwise
/// the noise is left to the unknown-homogeneous hyperparameter path.
pub fn analytic_problem(known_noise: bool) -> Problem {
    let sample_f: SampleF = Box::new(move |x, w, rng| {
        let EnvRef::Cont(wv) = w else {
            return Err(BqoError::DimensionMismatch(
                "analytic problem takes continuous w".into(),
            ));
        };
        let z = -1.0 + rng.sample::<f64, _>(StandardNormal);
        let y = z * x[0] * x[0] + wv[0];
        let lambda = x[0].powi(4);
        Ok((y, known_noise.then_some(lambda)))
    });
    let sample_g: SampleG = Box::new(move |x, rng| {
        let w: f64 = rng.sample(StandardNormal);
        let z = -1.0 + rng.sample::<f64, _>(StandardNormal);
        let y = z * x[0] * x[0] + w;
        let lambda = x[0].powi(4) + 1.0;
        Ok((y, known_noise.then_some(lambda)))
    });
    let theta_f = HyperParams {
        sigma0_sq: 1.0,
        alpha_x: vec![2.0],
        alpha_w: vec![0.5],
        task: None,
        mu0: 0.0,
        noise_var: (!known_noise).then_some(0.1),
    };
    let theta_g = HyperParams {
        sigma0_sq: 1.0,
        alpha_x: vec![2.0],
        alpha_w: vec![],
        task: None,
        mu0: 0.0,
        noise_var: (!known_noise).then_some(1.0),
    };
    Problem {
        name: "analytic".into(),
        domain: DecisionDomain::Box(vec![(-0.5, 0.5)]),
        w_domain: WDomain::Box(vec![(-3.5, 3.5)]),
        measure: Measure::GaussianProduct {
            means: vec![0.0],
            vars: vec![1.0],
        },
        family: KernelFamily::SqExp,
        theta_f,
        theta_g,
        sample_f,
        sample_g,
        true_g: Some(Box::new(|x| -x[0] * x[0])),
    }
}

/// The Branin function.
pub fn branin(u: f64, v: f64) -> f64 {
    let a = v - 5.1 / (4.0 * std::f64::consts::PI * std::f64::consts::PI) * u * u
        + 5.0 / std::f64::consts::PI * u
        - 6.0;
    a * a + 10.0 * (1.0 - 1.0 / (8.0 * std::f64::consts::PI)) * u.cos() + 10.0
}

/// Environmental support and weights of the Branin composition: w =
/// (x2, x3) on {0.25, 0.5, 0.75} x {0.2, 0.4, 0.6, 0.8}.
pub fn branin_weights() -> (Vec<(f64, f64)>, Vec<f64>) {
    let x2s = [0.25, 0.5, 0.75];
    let x3s = [0.2, 0.4, 0.6, 0.8];
    let table = [
        [0.0375, 0.0875, 0.0875, 0.0375],
        [0.0750, 0.1750, 0.1750, 0.0750],
        [0.0375, 0.0875, 0.0875, 0.0375],
    ];
    let mut support = Vec::new();
    let mut weights = Vec::new();
    for (i, x2) in x2s.iter().enumerate() {
        for (j, x3) in x3s.iter().enumerate() {
            support.push((*x2, *x3));
            weights.push(table[i][j]);
        }
    }
    (support, weights)
}

/// The composed Branin integrand over x = (x1, x4), w = (x2, x3), all in
/// the unit interval: F = y_b(15 x1 - 5, 15 x2) * y_b(15 x3 - 5, 15 x4).
/// Observations are noiseless and the exact 12-atom objective is available.
pub fn branin_problem() -> Problem {
    let f = |x: &[f64], w: &[f64]| {
        branin(15.0 * x[0] - 5.0, 15.0 * w[0]) * branin(15.0 * w[1] - 5.0, 15.0 * x[1])
    };
    let (support, weights) = branin_weights();
    let true_g = {
        let support = support.clone();
        let weights = weights.clone();
        move |x: &[f64]| {
            support
                .iter()
                .zip(weights.iter())
                .map(|((x2, x3), p)| p * f(x, &[*x2, *x3]))
                .sum::<f64>()
        }
    };
    let sample_f: SampleF = Box::new(move |x, w, _rng| {
        let EnvRef::Cont(wv) = w else {
            return Err(BqoError::DimensionMismatch(
                "branin problem takes continuous w".into(),
            ));
        };
        Ok((f(x, wv), Some(0.0)))
    });
    // The baseline observes the full weighted sum (a noiseless objective
    // evaluation).
    let sample_g: SampleG = {
        let tg = true_g;
        Box::new(move |x, _rng| Ok((tg(x), Some(0.0))))
    };
    let theta_f = HyperParams {
        sigma0_sq: 1e4,
        alpha_x: vec![10.0, 10.0],
        alpha_w: vec![10.0, 10.0],
        task: None,
        mu0: 0.0,
        noise_var: None,
    };
    let theta_g = HyperParams {
        sigma0_sq: 1e4,
        alpha_x: vec![10.0, 10.0],
        alpha_w: vec![],
        task: None,
        mu0: 0.0,
        noise_var: None,
    };
    Problem {
        name: "branin".into(),
        domain: DecisionDomain::Box(vec![(0.0, 1.0), (0.0, 1.0)]),
        w_domain: WDomain::Finite(
            support
                .iter()
                .map(|(a, b)| Env::Cont(vec![*a, *b]))
                .collect(),
        ),
        measure: Measure::Finite {
            support: support
                .iter()
                .map(|(a, b)| Env::Cont(vec![*a, *b]))
                .collect(),
            weights,
        },
        family: KernelFamily::Matern52,
        theta_f,
        theta_g,
        sample_f,
        sample_g,
        true_g: Some(Box::new(move |x| {
            let (support, weights) = branin_weights();
            support
                .iter()
                .zip(weights.iter())
                .map(|((x2, x3), p)| {
                    p * branin(15.0 * x[0] - 5.0, 15.0 * x2) * branin(15.0 * x3 - 5.0, 15.0 * x[1])
                })
                .sum()
        })),
    }
}

/// Grid sizes for the simulated problems.
#[derive(Debug, Clone, Copy)]
pub struct GpSimGrid {
    /// Points per axis of the (x, w) lattice over the unit square.
    pub xw: usize,
    /// Size of the fine z-grid carrying the idiosyncratic noise.
    pub z: usize,
}

impl Default for GpSimGrid {
    fn default() -> Self {
        GpSimGrid { xw: 50, z: 1000 }
    }
}

/// A problem drawn from a Gaussian process prior: the smooth part h lives
/// on an xw-lattice over the unit square with covariance
/// a_ratio * exp(-beta ||.|| ^2), and an independent N(0, 1 - a_ratio)
/// noise table over a fine z-grid. Observing F(x, w) draws one z.
///
/// The decision set is the x-lattice; w is uniform over the w-lattice.
pub fn gp_sim_problem(a_ratio: f64, beta: f64, grid: GpSimGrid, seed: u64) -> Result<Problem> {
    if !(a_ratio > 0.0 && a_ratio <= 1.0) {
        return Err(BqoError::InvalidConfig("a_ratio must lie in (0, 1]".into()));
    }
    let n = grid.xw;
    let alpha_h = a_ratio;
    let alpha_d = 1.0 - a_ratio;
    let axis: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    // The lattice covariance factorizes over axes, so the draw uses the
    // per-axis Cholesky factors: H = sqrt(alpha_h) * Lx * Z * Lw^T.
    let mut cov_axis = DMatrix::from_fn(n, n, |i, j| (-beta * (axis[i] - axis[j]).powi(2)).exp());
    for i in 0..n {
        cov_axis[(i, i)] += 1e-10;
    }
    let chol = loop {
        match cov_axis.clone().cholesky() {
            Some(c) => break c,
            None => {
                for i in 0..n {
                    cov_axis[(i, i)] += 1e-8;
                }
            }
        }
    };
    let l = chol.l();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    use rand::SeedableRng;
    let z_mat = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let h = alpha_h.sqrt() * &l * z_mat * l.transpose();
    let r: Vec<f64> = (0..grid.z)
        .map(|_| alpha_d.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mean_r = r.iter().sum::<f64>() / r.len() as f64;

    let snap = {
        let axis = axis.clone();
        move |v: f64| -> usize {
            let i = (v * (axis.len() - 1) as f64).round() as isize;
            i.clamp(0, axis.len() as isize - 1) as usize
        }
    };
    let h_arc = std::sync::Arc::new(h);
    let r_arc = std::sync::Arc::new(r);

    // Observations are single draws, so their noise is not observable;
    // both models treat it as an unknown homogeneous hyperparameter. The
    // fully smooth case has no z-noise at all and stays noiseless-known.
    let noiseless = alpha_d == 0.0;
    let sample_f: SampleF = {
        let h = h_arc.clone();
        let r = r_arc.clone();
        let snap = snap.clone();
        Box::new(move |x, w, rng| {
            let EnvRef::Cont(wv) = w else {
                return Err(BqoError::DimensionMismatch(
                    "simulated problem takes continuous w".into(),
                ));
            };
            let zi = rng.random_range(0..r.len());
            Ok((
                h[(snap(x[0]), snap(wv[0]))] + r[zi],
                noiseless.then_some(0.0),
            ))
        })
    };
    // Observing G draws one (W, Z) pair.
    let sample_g: SampleG = {
        let h = h_arc.clone();
        let r = r_arc.clone();
        let snap = snap.clone();
        Box::new(move |x, rng| {
            let ix = snap(x[0]);
            let wi = rng.random_range(0..h.ncols());
            let zi = rng.random_range(0..r.len());
            Ok((h[(ix, wi)] + r[zi], None))
        })
    };
    let true_g: TrueG = {
        let h = h_arc.clone();
        Box::new(move |x: &[f64]| {
            let row = h.row(snap(x[0]));
            row.sum() / row.len() as f64 + mean_r
        })
    };
    let theta_f = HyperParams {
        sigma0_sq: alpha_h.max(1e-3),
        alpha_x: vec![beta],
        alpha_w: vec![beta],
        task: None,
        mu0: 0.0,
        noise_var: (!noiseless).then_some(alpha_d),
    };
    let theta_g = HyperParams {
        sigma0_sq: alpha_h.max(1e-3),
        alpha_x: vec![beta],
        alpha_w: vec![],
        task: None,
        mu0: 0.0,
        noise_var: (!noiseless).then_some(0.5 * alpha_h + alpha_d),
    };
    Ok(Problem {
        name: format!("gp_sim(a={a_ratio},beta={beta})"),
        domain: DecisionDomain::Finite(axis.iter().map(|x| vec![*x]).collect()),
        w_domain: WDomain::Finite(axis.iter().map(|w| Env::Cont(vec![*w])).collect()),
        measure: Measure::Finite {
            support: axis.iter().map(|w| Env::Cont(vec![*w])).collect(),
            weights: vec![1.0 / n as f64; n],
        },
        family: KernelFamily::SqExp,
        theta_f,
        theta_g,
        sample_f,
        sample_g,
        true_g: Some(true_g),
    })
}
