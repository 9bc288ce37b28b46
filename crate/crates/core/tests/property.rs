//! Property tests for the structural invariants: kernel symmetry and
//! positive semidefiniteness, epigraph-value invariances, and the
//! interchange identity of the induced posterior mean.

use bqo::acquisition::{h_exact, two_line_h};
use bqo::gp::{fit, History};
use bqo::kernels::{kernel_eval, HyperParams, KernelFamily, Point};
use bqo::quadrature::{Measure, QuadPosterior};
use bqo::Env;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn coord() -> impl Strategy<Value = f64> {
    -2.0..2.0f64
}

fn pos() -> impl Strategy<Value = f64> {
    0.1..4.0f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_symmetry(
        sigma in pos(),
        ax in pos(),
        aw in pos(),
        x1 in coord(), w1 in coord(),
        x2 in coord(), w2 in coord(),
    ) {
        for family in [KernelFamily::SqExp, KernelFamily::Matern52] {
            let th = HyperParams { sigma0_sq: sigma, alpha_x: vec![ax], alpha_w: vec![aw], ..HyperParams::iso(1.0, 1.0, 1, 1) };
            let a = Point::cont(vec![x1], vec![w1]);
            let b = Point::cont(vec![x2], vec![w2]);
            let ab = kernel_eval(&th, family, a.as_ref(), b.as_ref()).unwrap();
            let ba = kernel_eval(&th, family, b.as_ref(), a.as_ref()).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-14 * ab.abs().max(1.0));
        }
    }

    #[test]
    fn gram_matrices_stay_psd(
        sigma in pos(),
        ax in pos(),
        aw in pos(),
        pts in proptest::collection::vec((coord(), coord()), 10),
    ) {
        let th = HyperParams { sigma0_sq: sigma, alpha_x: vec![ax], alpha_w: vec![aw], ..HyperParams::iso(1.0, 1.0, 1, 1) };
        let points: Vec<Point> = pts.iter().map(|(x, w)| Point::cont(vec![*x], vec![*w])).collect();
        let gram = DMatrix::from_fn(10, 10, |i, j| {
            kernel_eval(&th, KernelFamily::SqExp, points[i].as_ref(), points[j].as_ref()).unwrap()
        });
        let min_eig = gram.symmetric_eigenvalues().min();
        prop_assert!(min_eig >= -1e-8 * sigma, "min eigenvalue {min_eig}");
    }

    #[test]
    fn h_translation_invariance(
        a in proptest::collection::vec(-3.0..3.0f64, 2..10),
        shift in -5.0..5.0f64,
        seed in 0u64..1000,
    ) {
        let mut b = Vec::with_capacity(a.len());
        let mut s = seed;
        for _ in 0..a.len() {
            s = bqo::normal::derive_seed(s, 1);
            b.push((s % 1000) as f64 / 250.0 - 2.0);
        }
        let v = h_exact(&a, &b).unwrap().value;
        let shifted: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let vs = h_exact(&shifted, &b).unwrap().value;
        prop_assert!((v - vs).abs() < 1e-12, "{v} vs {vs}");
        // Value never below any pairwise envelope and never negative.
        prop_assert!(v >= -1e-12);
        let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for i in 0..a.len() {
            for j in (i + 1)..a.len() {
                let pair = a[i].max(a[j]) + two_line_h(a[i], b[i], a[j], b[j]) - amax;
                prop_assert!(v >= pair - 1e-12);
            }
        }
    }

    #[test]
    fn induced_mean_matches_weighted_sum(
        obs in proptest::collection::vec((coord(), coord(), -2.0..2.0f64), 1..7),
        atoms in proptest::collection::vec((coord(), 0.05..1.0f64), 1..5),
        x in coord(),
    ) {
        let th = HyperParams { mu0: 0.3, ..HyperParams::iso(1.0, 1.0, 1, 1) };
        let mut h = History::new();
        for (px, pw, y) in &obs {
            h.push(Point::cont(vec![*px], vec![*pw]), *y, Some(0.1)).unwrap();
        }
        let state = fit(h, th, KernelFamily::SqExp).unwrap();
        let measure = Measure::Finite {
            support: atoms.iter().map(|(w, _)| Env::Cont(vec![*w])).collect(),
            weights: atoms.iter().map(|(_, p)| *p).collect(),
        };
        let qp = QuadPosterior::new(state, measure).unwrap();
        let a = qp.a(&[x]).unwrap();
        let cross = qp.a_by_mean_sum(&[x]).unwrap();
        prop_assert!((a - cross).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {cross}");
    }
}
