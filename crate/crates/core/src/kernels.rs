//! Covariance functions over (x, w) pairs and their derivatives.
//!
//! Three families are supported: a squared exponential over the joint
//! (x, w) space, a 5/2-Matern over the joint space, and a task kernel that
//! couples a 5/2-Matern over x with a free positive-definite matrix over a
//! finite set of tasks. Inverse squared length scales are stored directly
//! (the `alpha` weights that multiply squared coordinate differences).

use crate::error::{BqoError, Result};
use nalgebra::DMatrix;

/// Environmental coordinate: either a continuous vector or a task index.
#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    Cont(Vec<f64>),
    Task(usize),
}

impl Env {
    pub fn as_ref(&self) -> EnvRef<'_> {
        match self {
            Env::Cont(v) => EnvRef::Cont(v),
            Env::Task(t) => EnvRef::Task(*t),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Env::Cont(v) => v.len(),
            Env::Task(_) => 0,
        }
    }
}

/// Borrowed view of an environmental coordinate.
#[derive(Debug, Clone, Copy)]
pub enum EnvRef<'a> {
    Cont(&'a [f64]),
    Task(usize),
}

/// A point in the integrand's domain A x W.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub x: Vec<f64>,
    pub w: Env,
}

impl Point {
    pub fn cont(x: Vec<f64>, w: Vec<f64>) -> Self {
        Point { x, w: Env::Cont(w) }
    }

    pub fn task(x: Vec<f64>, t: usize) -> Self {
        Point { x, w: Env::Task(t) }
    }

    pub fn as_ref(&self) -> PointRef<'_> {
        PointRef {
            x: &self.x,
            w: self.w.as_ref(),
        }
    }

    /// Concatenated free coordinates (x followed by continuous w, if any).
    pub fn coords(&self) -> Vec<f64> {
        let mut c = self.x.clone();
        if let Env::Cont(w) = &self.w {
            c.extend_from_slice(w);
        }
        c
    }

    /// Rebuild a point of the same w-kind from concatenated coordinates.
    pub fn from_coords(&self, coords: &[f64]) -> Point {
        match &self.w {
            Env::Cont(w) => {
                let d = self.x.len();
                assert_eq!(coords.len(), d + w.len());
                Point::cont(coords[..d].to_vec(), coords[d..].to_vec())
            }
            Env::Task(t) => {
                assert_eq!(coords.len(), self.x.len());
                Point::task(coords.to_vec(), *t)
            }
        }
    }
}

/// Borrowed view of a point.
#[derive(Debug, Clone, Copy)]
pub struct PointRef<'a> {
    pub x: &'a [f64],
    pub w: EnvRef<'a>,
}

impl<'a> PointRef<'a> {
    pub fn cont(x: &'a [f64], w: &'a [f64]) -> Self {
        PointRef {
            x,
            w: EnvRef::Cont(w),
        }
    }

    pub fn to_owned(&self) -> Point {
        Point {
            x: self.x.to_vec(),
            w: match self.w {
                EnvRef::Cont(v) => Env::Cont(v.to_vec()),
                EnvRef::Task(t) => Env::Task(t),
            },
        }
    }
}

/// Free lower-triangular parametrization of the task covariance matrix.
///
/// Off-diagonal entries are unconstrained; diagonal entries pass through a
/// softplus so the reconstructed factor always has a strictly positive
/// diagonal and the covariance L L^T is positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskChol {
    m: usize,
    free: Vec<f64>,
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl TaskChol {
    pub fn new(m: usize, free: Vec<f64>) -> Result<Self> {
        if free.len() != m * (m + 1) / 2 {
            return Err(BqoError::DimensionMismatch(format!(
                "task factor for {m} tasks needs {} entries, got {}",
                m * (m + 1) / 2,
                free.len()
            )));
        }
        Ok(TaskChol { m, free })
    }

    /// Build the free parametrization that reproduces a given covariance.
    pub fn from_cov(cov: &DMatrix<f64>) -> Result<Self> {
        let m = cov.nrows();
        if cov.ncols() != m {
            return Err(BqoError::DimensionMismatch(
                "task covariance must be square".into(),
            ));
        }
        let chol = cov.clone().cholesky().ok_or_else(|| {
            BqoError::InvalidConfig("task covariance is not positive definite".into())
        })?;
        let l = chol.l();
        let mut free = Vec::with_capacity(m * (m + 1) / 2);
        for i in 0..m {
            for j in 0..=i {
                if i == j {
                    free.push(softplus_inv(l[(i, j)]));
                } else {
                    free.push(l[(i, j)]);
                }
            }
        }
        Ok(TaskChol { m, free })
    }

    pub fn num_tasks(&self) -> usize {
        self.m
    }

    pub fn free(&self) -> &[f64] {
        &self.free
    }

    pub fn free_mut(&mut self) -> &mut [f64] {
        &mut self.free
    }

    /// The lower-triangular factor with softplus-mapped diagonal.
    pub fn factor(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.m, self.m);
        let mut k = 0;
        for i in 0..self.m {
            for j in 0..=i {
                l[(i, j)] = if i == j {
                    softplus(self.free[k])
                } else {
                    self.free[k]
                };
                k += 1;
            }
        }
        l
    }

    /// The reconstructed task covariance L L^T.
    pub fn cov(&self) -> DMatrix<f64> {
        let l = self.factor();
        &l * l.transpose()
    }
}

/// Kernel hyperparameters together with the prior mean constant and the
/// optional unknown homogeneous noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Signal variance; ignored by the task family (the task matrix carries
    /// the amplitude there).
    pub sigma0_sq: f64,
    /// Inverse squared length scales for the decision coordinates.
    pub alpha_x: Vec<f64>,
    /// Inverse squared length scales for continuous environmental
    /// coordinates; empty for the task family.
    pub alpha_w: Vec<f64>,
    /// Task covariance parametrization; present only for the task family.
    pub task: Option<TaskChol>,
    /// Constant prior mean.
    pub mu0: f64,
    /// Unknown homogeneous observation noise variance, when modeled.
    pub noise_var: Option<f64>,
}

impl HyperParams {
    pub fn iso(sigma0_sq: f64, alpha: f64, d: usize, p: usize) -> Self {
        HyperParams {
            sigma0_sq,
            alpha_x: vec![alpha; d],
            alpha_w: vec![alpha; p],
            task: None,
            mu0: 0.0,
            noise_var: None,
        }
    }

    // Negated comparisons here also reject NaN, which `<=` would admit.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn validate_positive(&self) -> Result<()> {
        if !(self.sigma0_sq > 0.0) {
            return Err(BqoError::InvalidConfig("sigma0_sq must be positive".into()));
        }
        if self
            .alpha_x
            .iter()
            .chain(self.alpha_w.iter())
            .any(|a| !(*a > 0.0))
        {
            return Err(BqoError::InvalidConfig(
                "length-scale weights must be positive".into(),
            ));
        }
        if let Some(nv) = self.noise_var {
            if !(nv >= 0.0) {
                return Err(BqoError::InvalidConfig(
                    "noise_var must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Covariance family tag; selected by string in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    SqExp,
    Matern52,
    TaskMatern52,
}

impl KernelFamily {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "sq_exp" => Ok(KernelFamily::SqExp),
            "matern52" => Ok(KernelFamily::Matern52),
            "task_matern52" => Ok(KernelFamily::TaskMatern52),
            other => Err(BqoError::InvalidConfig(format!(
                "unknown kernel family '{other}'"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            KernelFamily::SqExp => "sq_exp",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::TaskMatern52 => "task_matern52",
        }
    }
}

fn check_dims(theta: &HyperParams, family: KernelFamily, a: PointRef, b: PointRef) -> Result<()> {
    theta.validate_positive()?;
    if a.x.len() != theta.alpha_x.len() || b.x.len() != theta.alpha_x.len() {
        return Err(BqoError::DimensionMismatch(format!(
            "decision dims: points have {}/{}, theta has {}",
            a.x.len(),
            b.x.len(),
            theta.alpha_x.len()
        )));
    }
    match family {
        KernelFamily::SqExp | KernelFamily::Matern52 => match (a.w, b.w) {
            (EnvRef::Cont(wa), EnvRef::Cont(wb)) => {
                if wa.len() != theta.alpha_w.len() || wb.len() != theta.alpha_w.len() {
                    return Err(BqoError::DimensionMismatch(format!(
                        "environment dims: points have {}/{}, theta has {}",
                        wa.len(),
                        wb.len(),
                        theta.alpha_w.len()
                    )));
                }
                Ok(())
            }
            _ => Err(BqoError::DimensionMismatch(
                "continuous-w kernel applied to task-indexed points".into(),
            )),
        },
        KernelFamily::TaskMatern52 => {
            let task = theta.task.as_ref().ok_or_else(|| {
                BqoError::InvalidConfig("task kernel needs a task covariance".into())
            })?;
            match (a.w, b.w) {
                (EnvRef::Task(ta), EnvRef::Task(tb)) => {
                    if ta >= task.num_tasks() || tb >= task.num_tasks() {
                        return Err(BqoError::DimensionMismatch(format!(
                            "task index out of range: {ta}/{tb} with {} tasks",
                            task.num_tasks()
                        )));
                    }
                    Ok(())
                }
                _ => Err(BqoError::DimensionMismatch(
                    "task kernel applied to continuous-w points".into(),
                )),
            }
        }
    }
}

fn weighted_sq_dist(alpha: &[f64], a: &[f64], b: &[f64]) -> f64 {
    alpha
        .iter()
        .zip(a.iter().zip(b.iter()))
        .map(|(al, (u, v))| al * (u - v) * (u - v))
        .sum()
}

const SQRT5: f64 = 2.236_067_977_499_79;

fn matern52(r: f64) -> f64 {
    (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * (-SQRT5 * r).exp()
}

/// d matern52 / dr divided by r; finite at r = 0.
fn matern52_slope_over_r(r: f64) -> f64 {
    -(5.0 / 3.0) * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp()
}

/// Evaluate the prior covariance between two points.
pub fn kernel_eval(
    theta: &HyperParams,
    family: KernelFamily,
    a: PointRef,
    b: PointRef,
) -> Result<f64> {
    check_dims(theta, family, a, b)?;
    Ok(eval_unchecked(theta, family, a, b))
}

pub(crate) fn eval_unchecked(
    theta: &HyperParams,
    family: KernelFamily,
    a: PointRef,
    b: PointRef,
) -> f64 {
    match family {
        KernelFamily::SqExp => {
            let (EnvRef::Cont(wa), EnvRef::Cont(wb)) = (a.w, b.w) else {
                unreachable!()
            };
            let s = weighted_sq_dist(&theta.alpha_x, a.x, b.x)
                + weighted_sq_dist(&theta.alpha_w, wa, wb);
            theta.sigma0_sq * (-s).exp()
        }
        KernelFamily::Matern52 => {
            let (EnvRef::Cont(wa), EnvRef::Cont(wb)) = (a.w, b.w) else {
                unreachable!()
            };
            let s = weighted_sq_dist(&theta.alpha_x, a.x, b.x)
                + weighted_sq_dist(&theta.alpha_w, wa, wb);
            theta.sigma0_sq * matern52(s.sqrt())
        }
        KernelFamily::TaskMatern52 => {
            let (EnvRef::Task(ta), EnvRef::Task(tb)) = (a.w, b.w) else {
                unreachable!()
            };
            let cov = theta.task.as_ref().unwrap().cov();
            let s = weighted_sq_dist(&theta.alpha_x, a.x, b.x);
            cov[(ta, tb)] * matern52(s.sqrt())
        }
    }
}

/// Partial derivatives of the covariance with respect to the coordinates of
/// `a`: the decision part always, followed by the continuous environmental
/// part for the squared exponential and Matern families. The task index is
/// not differentiable, so the task family returns decision partials only.
pub fn kernel_grad(
    theta: &HyperParams,
    family: KernelFamily,
    a: PointRef,
    b: PointRef,
) -> Result<Vec<f64>> {
    check_dims(theta, family, a, b)?;
    Ok(grad_unchecked(theta, family, a, b))
}

pub(crate) fn grad_unchecked(
    theta: &HyperParams,
    family: KernelFamily,
    a: PointRef,
    b: PointRef,
) -> Vec<f64> {
    match family {
        KernelFamily::SqExp => {
            let (EnvRef::Cont(wa), EnvRef::Cont(wb)) = (a.w, b.w) else {
                unreachable!()
            };
            let val = eval_unchecked(theta, family, a, b);
            let mut g = Vec::with_capacity(a.x.len() + wa.len());
            for (al, (u, v)) in theta.alpha_x.iter().zip(a.x.iter().zip(b.x.iter())) {
                g.push(-2.0 * al * (u - v) * val);
            }
            for (al, (u, v)) in theta.alpha_w.iter().zip(wa.iter().zip(wb.iter())) {
                g.push(-2.0 * al * (u - v) * val);
            }
            g
        }
        KernelFamily::Matern52 => {
            let (EnvRef::Cont(wa), EnvRef::Cont(wb)) = (a.w, b.w) else {
                unreachable!()
            };
            let s = weighted_sq_dist(&theta.alpha_x, a.x, b.x)
                + weighted_sq_dist(&theta.alpha_w, wa, wb);
            let r = s.sqrt();
            let slope = theta.sigma0_sq * matern52_slope_over_r(r);
            let mut g = Vec::with_capacity(a.x.len() + wa.len());
            for (al, (u, v)) in theta.alpha_x.iter().zip(a.x.iter().zip(b.x.iter())) {
                g.push(slope * al * (u - v));
            }
            for (al, (u, v)) in theta.alpha_w.iter().zip(wa.iter().zip(wb.iter())) {
                g.push(slope * al * (u - v));
            }
            g
        }
        KernelFamily::TaskMatern52 => {
            let (EnvRef::Task(ta), EnvRef::Task(tb)) = (a.w, b.w) else {
                unreachable!()
            };
            let cov = theta.task.as_ref().unwrap().cov();
            let s = weighted_sq_dist(&theta.alpha_x, a.x, b.x);
            let r = s.sqrt();
            let slope = cov[(ta, tb)] * matern52_slope_over_r(r);
            theta
                .alpha_x
                .iter()
                .zip(a.x.iter().zip(b.x.iter()))
                .map(|(al, (u, v))| slope * al * (u - v))
                .collect()
        }
    }
}

/// Partials with respect to the continuous environmental coordinates of `a`
/// alone. Errors for the task family, whose environmental coordinate is an
/// index.
pub fn kernel_grad_w(
    theta: &HyperParams,
    family: KernelFamily,
    a: PointRef,
    b: PointRef,
) -> Result<Vec<f64>> {
    if family == KernelFamily::TaskMatern52 {
        return Err(BqoError::Unsupported(
            "task kernels are not differentiable in the task index".into(),
        ));
    }
    let full = kernel_grad(theta, family, a, b)?;
    Ok(full[a.x.len()..].to_vec())
}

/// Gradient of the covariance with respect to each kernel hyperparameter.
#[derive(Debug, Clone)]
pub struct KernelHyperGrad {
    pub sigma0_sq: f64,
    pub alpha_x: Vec<f64>,
    pub alpha_w: Vec<f64>,
    /// Partials with respect to the free task-factor entries (packed
    /// row-major lower triangle), empty for non-task families.
    pub task: Vec<f64>,
}

pub fn kernel_hyper_grad(
    theta: &HyperParams,
    family: KernelFamily,
    a: PointRef,
    b: PointRef,
) -> Result<KernelHyperGrad> {
    check_dims(theta, family, a, b)?;
    let g = match family {
        KernelFamily::SqExp => {
            let (EnvRef::Cont(wa), EnvRef::Cont(wb)) = (a.w, b.w) else {
                unreachable!()
            };
            let val = eval_unchecked(theta, family, a, b);
            KernelHyperGrad {
                sigma0_sq: val / theta.sigma0_sq,
                alpha_x: a
                    .x
                    .iter()
                    .zip(b.x.iter())
                    .map(|(u, v)| -(u - v) * (u - v) * val)
                    .collect(),
                alpha_w: wa
                    .iter()
                    .zip(wb.iter())
                    .map(|(u, v)| -(u - v) * (u - v) * val)
                    .collect(),
                task: Vec::new(),
            }
        }
        KernelFamily::Matern52 => {
            let (EnvRef::Cont(wa), EnvRef::Cont(wb)) = (a.w, b.w) else {
                unreachable!()
            };
            let s = weighted_sq_dist(&theta.alpha_x, a.x, b.x)
                + weighted_sq_dist(&theta.alpha_w, wa, wb);
            let r = s.sqrt();
            let val = theta.sigma0_sq * matern52(r);
            // d/d alpha = (dK/dr) * delta^2 / (2 r); finite at r = 0.
            let half_slope = 0.5 * theta.sigma0_sq * matern52_slope_over_r(r);
            KernelHyperGrad {
                sigma0_sq: val / theta.sigma0_sq,
                alpha_x: a
                    .x
                    .iter()
                    .zip(b.x.iter())
                    .map(|(u, v)| half_slope * (u - v) * (u - v))
                    .collect(),
                alpha_w: wa
                    .iter()
                    .zip(wb.iter())
                    .map(|(u, v)| half_slope * (u - v) * (u - v))
                    .collect(),
                task: Vec::new(),
            }
        }
        KernelFamily::TaskMatern52 => {
            let (EnvRef::Task(ta), EnvRef::Task(tb)) = (a.w, b.w) else {
                unreachable!()
            };
            let task = theta.task.as_ref().unwrap();
            let l = task.factor();
            let m = task.num_tasks();
            let cov_ab = (&l * l.transpose())[(ta, tb)];
            let s = weighted_sq_dist(&theta.alpha_x, a.x, b.x);
            let r = s.sqrt();
            let m52 = matern52(r);
            let half_slope = 0.5 * cov_ab * matern52_slope_over_r(r);
            let mut task_grad = Vec::with_capacity(m * (m + 1) / 2);
            let mut k = 0;
            for i in 0..m {
                for j in 0..=i {
                    // d cov(ta,tb) / d L_{ij}
                    let mut d = 0.0;
                    if ta == i && j <= tb {
                        d += l[(tb, j)];
                    }
                    if tb == i && j <= ta {
                        d += l[(ta, j)];
                    }
                    let chain = if i == j { sigmoid(task.free()[k]) } else { 1.0 };
                    task_grad.push(d * chain * m52);
                    k += 1;
                }
            }
            KernelHyperGrad {
                sigma0_sq: 0.0,
                alpha_x: a
                    .x
                    .iter()
                    .zip(b.x.iter())
                    .map(|(u, v)| half_slope * (u - v) * (u - v))
                    .collect(),
                alpha_w: Vec::new(),
                task: task_grad,
            }
        }
    };
    Ok(g)
}
