//! Bayesian quadrature optimization.
//!
//! Optimizes objectives of the form G(x) = sum_w F(x, w) p(w) or
//! G(x) = integral of F(x, w) p(w) dw, where F is expensive and observed
//! with (possibly zero) Gaussian noise. A Gaussian process prior on F
//! induces a posterior on G; sampling decisions maximize the one-step value
//! of information of observing F at a candidate (x, w). Two interchangeable
//! computation schemes are provided (a discretization-free Monte Carlo
//! scheme with unbiased stochastic gradients, and an exact scheme on a
//! discretized decision set), alongside expected improvement and knowledge
//! gradient baselines and the reproducible benchmark problems.

pub mod acquisition;
pub mod driver;
pub mod error;
pub mod gp;
pub mod inference;
pub mod kernels;
pub mod normal;
pub mod problems;
pub mod quadrature;

pub use error::{BqoError, Result};
pub use kernels::{Env, EnvRef, HyperParams, KernelFamily, Point, PointRef, TaskChol};
