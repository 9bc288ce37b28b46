//! Shared oracles for the integration suites. Everything here recomputes
//! model quantities from first principles (dense inverses, explicit
//! quadrature, brute-force sums) independently of the library's
//! factorized implementations.

#![allow(dead_code)]

use bqo::gp::History;
use bqo::kernels::{kernel_eval, HyperParams, KernelFamily, Point, PointRef};
use bqo::quadrature::{Measure, QuadPosterior};
use nalgebra::{DMatrix, DVector};

/// Dense-inverse posterior mean and covariance straight from the defining
/// matrix formulas.
pub struct DenseOracle {
    history: History,
    theta: HyperParams,
    family: KernelFamily,
    a_inv: DMatrix<f64>,
    resid: DVector<f64>,
}

impl DenseOracle {
    /// `jitter` must match the fitted state's diagonal regularization; the
    /// defining matrix A_n includes it.
    pub fn new(history: History, theta: HyperParams, family: KernelFamily, jitter: f64) -> Self {
        let n = history.len();
        let noise = history.effective_noise(&theta);
        let a = DMatrix::from_fn(n, n, |i, j| {
            let mut v = kernel_eval(
                &theta,
                family,
                history.points()[i].as_ref(),
                history.points()[j].as_ref(),
            )
            .unwrap();
            if i == j {
                v += noise[i] + jitter;
            }
            v
        });
        let a_inv = if n == 0 {
            DMatrix::zeros(0, 0)
        } else {
            a.try_inverse().expect("oracle matrix inversion failed")
        };
        let resid = DVector::from_iterator(n, history.values().iter().map(|y| y - theta.mu0));
        DenseOracle {
            history,
            theta,
            family,
            a_inv,
            resid,
        }
    }

    fn k_vec(&self, q: PointRef) -> DVector<f64> {
        DVector::from_fn(self.history.len(), |i, _| {
            kernel_eval(
                &self.theta,
                self.family,
                q,
                self.history.points()[i].as_ref(),
            )
            .unwrap()
        })
    }

    pub fn mean(&self, q: PointRef) -> f64 {
        if self.history.is_empty() {
            return self.theta.mu0;
        }
        self.theta.mu0 + (self.k_vec(q).transpose() * &self.a_inv * &self.resid)[(0, 0)]
    }

    pub fn cov(&self, q1: PointRef, q2: PointRef) -> f64 {
        let prior = kernel_eval(&self.theta, self.family, q1, q2).unwrap();
        if self.history.is_empty() {
            return prior;
        }
        prior - (self.k_vec(q1).transpose() * &self.a_inv * &self.k_vec(q2))[(0, 0)]
    }

    /// B(x, target) for a discrete measure by direct weighted sum.
    pub fn b_point(&self, measure: &Measure, x: &[f64], target: PointRef) -> f64 {
        match measure {
            Measure::Finite { support, weights } => support
                .iter()
                .zip(weights.iter())
                .map(|(env, p)| {
                    p * kernel_eval(
                        &self.theta,
                        self.family,
                        PointRef { x, w: env.as_ref() },
                        target,
                    )
                    .unwrap()
                })
                .sum(),
            _ => panic!("oracle b_point needs a finite measure"),
        }
    }

    /// Posterior objective mean by the weighted sum over atoms.
    pub fn a(&self, measure: &Measure, x: &[f64]) -> f64 {
        match measure {
            Measure::Finite { support, weights } => support
                .iter()
                .zip(weights.iter())
                .map(|(env, p)| p * self.mean(PointRef { x, w: env.as_ref() }))
                .sum(),
            _ => panic!("oracle a needs a finite measure"),
        }
    }

    /// sigma_tilde by the defining ratio with dense solves.
    pub fn sigma_tilde(&self, measure: &Measure, x: &[f64], cand: &Point, lambda: f64) -> f64 {
        let n = self.history.len();
        let gamma = self.k_vec(cand.as_ref());
        let bx = DVector::from_fn(n, |i, _| {
            self.b_point(measure, x, self.history.points()[i].as_ref())
        });
        let b_cand = self.b_point(measure, x, cand.as_ref());
        let prior_cc = kernel_eval(&self.theta, self.family, cand.as_ref(), cand.as_ref()).unwrap();
        let num = if n == 0 {
            b_cand
        } else {
            b_cand - (bx.transpose() * &self.a_inv * &gamma)[(0, 0)]
        };
        let den_sq = if n == 0 {
            prior_cc + lambda
        } else {
            prior_cc - (gamma.transpose() * &self.a_inv * &gamma)[(0, 0)] + lambda
        };
        if den_sq <= 1e-12 {
            return 0.0;
        }
        num / den_sq.sqrt()
    }
}

/// Gauss-Hermite nodes and weights for integrals against exp(-t^2),
/// computed by the Golub-Welsch eigen decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i - 1, i)] = b;
        j[(i, i - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let node = eig.eigenvalues[k];
            let v0 = eig.eigenvectors[(0, k)];
            let weight = std::f64::consts::PI.sqrt() * v0 * v0;
            (node, weight)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Integral of f against the N(mu, var) density via Gauss-Hermite.
pub fn gauss_expect(n: usize, mu: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let c = 1.0 / std::f64::consts::PI.sqrt();
    nodes
        .iter()
        .zip(weights.iter())
        .map(|(t, w)| c * w * f(mu + (2.0 * var).sqrt() * t))
        .sum()
}

/// Convenience builder of a posterior over a finite-measure problem.
pub fn finite_qp(
    history: History,
    theta: HyperParams,
    family: KernelFamily,
    measure: Measure,
) -> QuadPosterior {
    let state = bqo::gp::fit(history, theta, family).unwrap();
    QuadPosterior::new(state, measure).unwrap()
}
