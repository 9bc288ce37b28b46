//! Fast structural checks runnable from the command line: kernel gradient
//! consistency, the dense posterior oracle, the exact epigraph value
//! against Monte Carlo, and the law-of-total-variance identity for the
//! update scale.

use bqo::acquisition::h_exact;
use bqo::gp::{fit, History};
use bqo::kernels::{kernel_eval, kernel_grad, HyperParams, KernelFamily, Point, TaskChol};
use bqo::quadrature::{Measure, QuadPosterior};
use bqo::Env;
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type CheckResult = Result<String, String>;

fn random_theta(rng: &mut ChaCha8Rng, family: KernelFamily) -> HyperParams {
    let mut th = HyperParams {
        sigma0_sq: rng.random_range(0.4..2.0),
        alpha_x: vec![rng.random_range(0.3..3.0), rng.random_range(0.3..3.0)],
        alpha_w: if family == KernelFamily::TaskMatern52 {
            vec![]
        } else {
            vec![rng.random_range(0.3..3.0)]
        },
        task: None,
        mu0: rng.random_range(-0.5..0.5),
        noise_var: None,
    };
    if family == KernelFamily::TaskMatern52 {
        let free: Vec<f64> = (0..6).map(|_| rng.random_range(-0.7..0.7)).collect();
        th.task = Some(TaskChol::new(3, free).unwrap());
    }
    th
}

fn random_point(rng: &mut ChaCha8Rng, family: KernelFamily) -> Point {
    let x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    match family {
        KernelFamily::TaskMatern52 => Point::task(x, rng.random_range(0..3)),
        _ => Point::cont(x, vec![rng.random_range(-1.0..1.0)]),
    }
}

/// Kernel gradients against central finite differences, all families.
pub fn check_kernel_gradients() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for family in [
        KernelFamily::SqExp,
        KernelFamily::Matern52,
        KernelFamily::TaskMatern52,
    ] {
        for _ in 0..20 {
            let th = random_theta(&mut rng, family);
            let a = random_point(&mut rng, family);
            let b = random_point(&mut rng, family);
            let g = kernel_grad(&th, family, a.as_ref(), b.as_ref()).map_err(|e| e.to_string())?;
            let coords = a.coords();
            for (j, gj) in g.iter().enumerate() {
                let mut up = coords.clone();
                let mut dn = coords.clone();
                up[j] += step;
                dn[j] -= step;
                let fd = (kernel_eval(&th, family, a.from_coords(&up).as_ref(), b.as_ref())
                    .unwrap()
                    - kernel_eval(&th, family, a.from_coords(&dn).as_ref(), b.as_ref()).unwrap())
                    / (2.0 * step);
                let rel = (gj - fd).abs() / fd.abs().max(1e-3);
                worst = worst.max(rel);
                if rel > 1e-6 {
                    return Err(format!(
                        "{family:?} coordinate {j}: relative error {rel:.2e}"
                    ));
                }
            }
        }
    }
    Ok(format!("max relative error {worst:.2e}"))
}

/// Factorized posterior against the dense-inverse formulas.
pub fn check_gp_oracle() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let th = HyperParams {
            mu0: 0.2,
            ..HyperParams::iso(1.3, 1.1, 1, 1)
        };
        let noisy = trial % 2 == 0;
        let mut h = History::new();
        let n = 8;
        for _ in 0..n {
            h.push(
                Point::cont(
                    vec![rng.random_range(-1.0..1.0)],
                    vec![rng.random_range(-1.0..1.0)],
                ),
                rng.random_range(-1.5..1.5),
                Some(if noisy { 0.2 } else { 0.0 }),
            )
            .unwrap();
        }
        let state = fit(h.clone(), th.clone(), KernelFamily::SqExp).map_err(|e| e.to_string())?;
        let noise = h.effective_noise(&th);
        // Same A_n the model factorizes (noise and jitter included),
        // inverted densely instead of through the Cholesky path.
        let a = DMatrix::from_fn(n, n, |i, j| {
            let mut v = kernel_eval(
                &th,
                KernelFamily::SqExp,
                h.points()[i].as_ref(),
                h.points()[j].as_ref(),
            )
            .unwrap();
            if i == j {
                v += noise[i] + state.jitter();
            }
            v
        });
        let a_inv = a.try_inverse().ok_or("oracle inversion failed")?;
        let resid = DVector::from_iterator(n, h.values().iter().map(|y| y - th.mu0));
        for _ in 0..20 {
            let q = Point::cont(
                vec![rng.random_range(-1.0..1.0)],
                vec![rng.random_range(-1.0..1.0)],
            );
            let kv = DVector::from_fn(n, |i, _| {
                kernel_eval(&th, KernelFamily::SqExp, q.as_ref(), h.points()[i].as_ref()).unwrap()
            });
            let mean_ref = th.mu0 + (kv.transpose() * &a_inv * &resid)[(0, 0)];
            let var_ref = kernel_eval(&th, KernelFamily::SqExp, q.as_ref(), q.as_ref()).unwrap()
                - (kv.transpose() * &a_inv * &kv)[(0, 0)];
            let mean = state
                .posterior_mean(q.as_ref())
                .map_err(|e| e.to_string())?;
            let var = state
                .posterior_cov(q.as_ref(), q.as_ref())
                .map_err(|e| e.to_string())?;
            let rel = ((mean - mean_ref).abs() / mean_ref.abs().max(1.0))
                .max((var - var_ref).abs() / var_ref.abs().max(1.0));
            worst = worst.max(rel);
            if rel > 1e-8 {
                return Err(format!("posterior mismatch, relative error {rel:.2e}"));
            }
        }
    }
    Ok(format!("max relative error {worst:.2e}"))
}

/// The exact epigraph value of E[max(a + b Z)] - max(a) against Monte
/// Carlo with 1e5 draws, parameterized by the excess function so the
/// harness tests can inject a broken one.
pub fn check_h_against_mc(excess: fn(f64) -> f64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let l = 6;
        let a: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        // The value via the envelope subset but the injected excess function.
        let env = h_exact(&a, &b).map_err(|e| e.to_string())?;
        let mut value = 0.0;
        for i in 0..env.kept.len().saturating_sub(1) {
            value += (b[env.kept[i + 1]] - b[env.kept[i]]) * excess(-env.breakpoints[i].abs());
        }
        let m = 100_000;
        let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..m {
            let z: f64 = rng.sample(StandardNormal);
            let best = a
                .iter()
                .zip(b.iter())
                .map(|(ai, bi)| ai + bi * z)
                .fold(f64::NEG_INFINITY, f64::max)
                - amax;
            sum += best;
            sumsq += best * best;
        }
        let mean = sum / m as f64;
        let se = ((sumsq / m as f64 - mean * mean) / m as f64).sqrt();
        let dev = (value - mean).abs() / se.max(1e-12);
        worst = worst.max(dev);
        if dev > 5.0 {
            return Err(format!(
                "exact value {value:.6} vs MC {mean:.6} ({dev:.1} SE)"
            ));
        }
    }
    Ok(format!("max deviation {worst:.2} SE"))
}

/// sigma_tilde^2 equals the one-step drop in Var[G] on a small finite
/// problem.
pub fn check_sigma_variance_identity() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let th = HyperParams {
        mu0: 0.1,
        ..HyperParams::iso(1.0, 1.2, 1, 1)
    };
    let xs = [-0.5, 0.0, 0.5];
    let ws = [-0.4, 0.1, 0.8];
    let measure = Measure::Finite {
        support: ws.iter().map(|w| Env::Cont(vec![*w])).collect(),
        weights: vec![0.3, 0.4, 0.3],
    };
    let mut h = History::new();
    for _ in 0..5 {
        h.push(
            Point::cont(
                vec![xs[rng.random_range(0..3)]],
                vec![ws[rng.random_range(0..3)]],
            ),
            rng.random_range(-1.0..1.0),
            Some(0.15),
        )
        .unwrap();
    }
    let state = fit(h.clone(), th.clone(), KernelFamily::SqExp).map_err(|e| e.to_string())?;
    let qp = QuadPosterior::new(state, measure.clone()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for &cx in &xs {
        for &cw in &ws {
            let cand = Point::cont(vec![cx], vec![cw]);
            for &x in &xs {
                let s = qp
                    .sigma_tilde(&[x], &cand, 0.15)
                    .map_err(|e| e.to_string())?;
                let var_n = qp.var_g(&[x]).map_err(|e| e.to_string())?;
                let mut h2 = h.clone();
                h2.push(cand.clone(), 0.0, Some(0.15)).unwrap();
                let state2 = fit(h2, th.clone(), KernelFamily::SqExp).map_err(|e| e.to_string())?;
                let qp2 = QuadPosterior::new(state2, measure.clone()).map_err(|e| e.to_string())?;
                let var_n1 = qp2.var_g(&[x]).map_err(|e| e.to_string())?;
                let dev = (s * s - (var_n - var_n1)).abs();
                worst = worst.max(dev);
                if dev > 1e-8 {
                    return Err(format!(
                        "identity violated by {dev:.2e} at x={x} cand=({cx},{cw})"
                    ));
                }
            }
        }
    }
    Ok(format!("max deviation {worst:.2e}"))
}

/// The production excess function.
pub fn standard_excess(z: f64) -> f64 {
    bqo::normal::excess(z)
}

pub fn run_all(mut report: impl FnMut(&str, &CheckResult)) -> bool {
    let checks: Vec<(&str, CheckResult)> = vec![
        (
            "kernel gradient finite differences",
            check_kernel_gradients(),
        ),
        ("dense posterior oracle", check_gp_oracle()),
        (
            "epigraph value vs Monte Carlo",
            check_h_against_mc(standard_excess),
        ),
        (
            "update-scale variance identity",
            check_sigma_variance_identity(),
        ),
    ];
    let mut ok = true;
    for (name, result) in &checks {
        report(name, result);
        ok &= result.is_ok();
    }
    ok
}
