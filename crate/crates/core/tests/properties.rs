use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use hdqtest::numlin::{project_out, psd_sqrt};
use hdqtest::qreg::{fit_nuisance, Vector};
use hdqtest::sim::rng_stream;
use hdqtest::stats::{combine, max_pvalue, run_full_test};
use hdqtest::{CombinationRule, Dataset, Matrix, TraceMode};

fn gaussian(seed: u64, n: usize, p: usize) -> Matrix {
    let mut rng = rng_stream(seed, 0);
    Matrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

fn with_intercept(mut z: Matrix) -> Matrix {
    z.column_mut(0).fill(1.0);
    z
}

fn instance(seed: u64, n: usize, q: usize, p: usize, tau: f64) -> Dataset {
    let z = with_intercept(gaussian(seed, n, q));
    let x = gaussian(seed ^ 0xA5A5, n, p);
    let y = Vector::from_iterator(n, gaussian(seed ^ 0x5A5A, n, 1).iter().copied());
    Dataset::new(y, z, x, tau).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn assert_same_result(a: &hdqtest::TestResult, b: &hdqtest::TestResult, tol: f64) {
    for (x, y) in [
        (a.t_sum, b.t_sum),
        (a.p_sum, b.p_sum),
        (a.t_max, b.t_max),
        (a.p_max, b.p_max),
        (a.p_cc, b.p_cc),
        (a.trace_estimate, b.trace_estimate),
    ] {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), n in 8usize..40, q in 1usize..5, p in 1usize..12) {
        let z = with_intercept(gaussian(seed, n, q));
        let x = gaussian(seed.wrapping_add(1), n, p);
        let w = project_out(&z, &x).unwrap();
        let ww = project_out(&z, &w).unwrap();
        prop_assert!((&ww - &w).amax() <= 1e-10);
        prop_assert!((z.transpose() * &w).amax() <= 1e-9 * (1.0 + x.amax()) * n as f64);
    }

    #[test]
    fn psd_root_reconstructs(seed in any::<u64>(), d in 1usize..15, rank in 1usize..15) {
        let a = gaussian(seed, d, rank.min(d));
        let s = &a * a.transpose();
        let r = psd_sqrt(&s).unwrap();
        prop_assert!((&r * &r - &s).norm() / s.norm() <= 1e-8);
    }

    #[test]
    fn fit_is_equivariant(seed in any::<u64>(), n in 10usize..60, q in 1usize..4, tau in 0.05f64..0.95) {
        let z = with_intercept(gaussian(seed, n, q));
        let y = Vector::from_iterator(n, gaussian(seed ^ 7, n, 1).iter().copied());
        let c = Vector::from_iterator(q, gaussian(seed ^ 11, q, 1).iter().map(|v| 3.0 * v));
        let base = fit_nuisance(&y, &z, tau).unwrap();
        let shifted = fit_nuisance(&(&y + &z * &c), &z, tau).unwrap();
        prop_assert!((base.objective - shifted.objective).abs() <= 1e-10, "{} vs {}", base.objective, shifted.objective);
        prop_assert_eq!(&base.psi_hat, &shifted.psi_hat);
    }

    #[test]
    fn fit_meets_sign_condition(seed in any::<u64>(), n in 10usize..80, q in 1usize..4, tau in 0.05f64..0.95) {
        let z = with_intercept(gaussian(seed, n, q));
        let y = Vector::from_iterator(n, gaussian(seed ^ 3, n, 1).iter().copied());
        let fit = fit_nuisance(&y, &z, tau).unwrap();
        let r = &y - &z * &fit.alpha_hat;
        let tol = 1e-9 * (1.0 + y.amax());
        let negative = r.iter().filter(|&&v| v < -tol).count() as f64;
        let nonpositive = r.iter().filter(|&&v| v <= tol).count() as f64;
        let nt = n as f64 * tau;
        prop_assert!(negative <= nt + 1e-9 && nonpositive >= nt - 1e-9);
    }

    #[test]
    fn scores_ignore_x(seed in any::<u64>(), n in 12usize..50, p in 3usize..20, tau in 0.1f64..0.9) {
        let d = instance(seed, n, 2, p, tau);
        let perm: Vec<usize> = (0..p).rev().collect();
        let x2 = Matrix::from_fn(n, p, |i, j| d.x[(i, perm[j])]);
        let d2 = Dataset::new(d.y.clone(), d.z.clone(), x2, tau).unwrap();
        let a = run_full_test(&d, CombinationRule::default(), TraceMode::Estimate).unwrap();
        let b = run_full_test(&d2, CombinationRule::default(), TraceMode::Estimate).unwrap();
        assert_same_result(&a, &b, 1e-10);
        prop_assert_eq!(perm[b.argmax_col], a.argmax_col);
        let fa = fit_nuisance(&d.y, &d.z, tau).unwrap();
        let fb = fit_nuisance(&d2.y, &d2.z, tau).unwrap();
        prop_assert_eq!(fa.psi_hat, fb.psi_hat);
    }

    #[test]
    fn row_order_does_not_matter(seed in any::<u64>(), n in 12usize..50, p in 3usize..20, tau in 0.1f64..0.9) {
        let d = instance(seed, n, 2, p, tau);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.rotate_left(seed as usize % n);
        idx.swap(0, n - 1);
        let a = run_full_test(&d, CombinationRule::default(), TraceMode::Estimate).unwrap();
        let b = run_full_test(&d.select_rows(&idx), CombinationRule::default(), TraceMode::Estimate).unwrap();
        assert_same_result(&a, &b, 1e-9);
    }

    #[test]
    fn column_scale_leaves_t_max(seed in any::<u64>(), n in 12usize..50, p in 3usize..20, c in prop::sample::select(vec![1e-3, 0.5, 7.0, 1e3])) {
        let d = instance(seed, n, 2, p, 0.5);
        let j = seed as usize % p;
        let mut x = d.x.clone();
        x.column_mut(j).scale_mut(c);
        let d2 = Dataset::new(d.y.clone(), d.z.clone(), x, 0.5).unwrap();
        let a = run_full_test(&d, CombinationRule::default(), TraceMode::Estimate).unwrap();
        let b = run_full_test(&d2, CombinationRule::default(), TraceMode::Estimate).unwrap();
        prop_assert!(rel(b.t_max, a.t_max) <= 1e-10);
    }

    #[test]
    fn p_max_decreases(t in 0.0f64..60.0, dt in 0.01f64..5.0, p in 3usize..2000) {
        let (lo, hi) = (max_pvalue(t, p).unwrap(), max_pvalue(t + dt, p).unwrap());
        prop_assert!(hi <= lo);
        // strict wherever the value is distinguishable from 1 in f64
        if lo < 1.0 - 1e-12 {
            prop_assert!(hi < lo);
        }
    }

    #[test]
    fn cauchy_p_increases(a in 0.001f64..0.99, b in 0.001f64..0.99, da in 0.001f64..0.009) {
        for rule in [CombinationRule::CauchyEqualWeights, CombinationRule::CauchyPaperSum] {
            let lo = combine(a, b, rule, 0.05).unwrap().p_value;
            prop_assert!(combine(a + da, b, rule, 0.05).unwrap().p_value > lo);
            prop_assert!(combine(a, b + da, rule, 0.05).unwrap().p_value > lo);
        }
    }

    #[test]
    fn p_values_are_probabilities(seed in any::<u64>(), n in 12usize..40, p in 3usize..30, tau in 0.1f64..0.9) {
        let d = instance(seed, n, 2, p, tau);
        for rule in [CombinationRule::CauchyEqualWeights, CombinationRule::CauchyPaperSum, CombinationRule::MinP] {
            let r = run_full_test(&d, rule, TraceMode::Estimate).unwrap();
            for v in [r.p_sum, r.p_max, r.p_cc] {
                prop_assert!(v > 0.0 && v < 1.0);
            }
        }
    }
}
