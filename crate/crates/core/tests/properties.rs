use std::f64::consts::PI;

use conelab::cone_profiles::{f_v, solve_cap, solve_wedge};
use conelab::domain_solver::solve_ball;
use conelab::expansion::{build_cutoff_c, c_bound, first_order_coefficient, ModeBasis, DEFAULT_BLEND};
use conelab::geometry::{example1_map, DiffeoMap};
use conelab::harness::{fit_rate, fit_rate_best, parse_angle, ExperimentConfig, RateModel};
use proptest::prelude::*;

fn samples(f: impl Fn(f64) -> f64, lo: f64, decades: f64, m: usize) -> Vec<(f64, f64)> {
    (0..m)
        .map(|i| lo * 10f64.powf(decades * i as f64 / (m - 1) as f64))
        .map(|d| (d, f(d)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn power_laws_are_recovered(k in 0.3f64..3.0, c in 1e-3f64..1e3, lo in 1e-6f64..1e-3, m in 8usize..40) {
        let fit = fit_rate(&samples(|d| c * d.powf(k), lo, 1.5, m)).unwrap();
        prop_assert!((fit.exponent - k).abs() < 1e-9);
        prop_assert!((fit.constant / c - 1.0).abs() < 1e-8);
        prop_assert!(fit.jackknife_spread < 1e-9);
        prop_assert!(fit.window.0 < fit.window.1);
    }

    #[test]
    fn log_factor_is_detected(k in 1.0f64..3.0, c in 1e-2f64..1e2) {
        let fit = fit_rate_best(&samples(|d| c * d.powf(k) * d.ln().abs(), 1e-6, 3.0, 30)).unwrap();
        prop_assert_eq!(fit.model, RateModel::LogCorrected);
        prop_assert!((fit.exponent - k).abs() < 1e-8);
    }

    #[test]
    fn angles_round_trip(p in 1u32..20, q in 1u32..20) {
        let a = parse_angle(&format!("{p}pi/{q}")).unwrap();
        prop_assert!((a - p as f64 * PI / q as f64).abs() < 1e-14 * a.max(1.0));
    }

    #[test]
    fn cutoff_stays_below_bound(n in 3usize..8, rho in proptest::collection::vec(0.0f64..4.0, 1..50)) {
        let c = build_cutoff_c(&rho, n, DEFAULT_BLEND).unwrap();
        for (r, cv) in rho.iter().zip(&c) {
            prop_assert!(cv.is_finite());
            prop_assert!(*cv <= c_bound(*r, n) + 1e-12);
        }
    }

    #[test]
    fn ball_center_value(n in 3usize..7, s in 0.1f64..5.0) {
        let b = solve_ball(n, s, 64).unwrap();
        prop_assert!((b.w[0] - s / 2.0).abs() < 1e-10 * s);
        prop_assert!(b.u_error() < 1e-8);
    }

    #[test]
    fn wedge_profiles_are_symmetric_and_bounded(alpha in 0.3f64..PI) {
        let p = solve_wedge(alpha, 64).unwrap();
        let m = p.len() - 1;
        for i in 0..=m {
            prop_assert!((p.rho[i] - p.rho[m - i]).abs() < 1e-10);
        }
        let (c3, c4) = p.rho_bounds();
        prop_assert!(c3 > 0.0 && c4 <= 1.0 + 1e-9);
    }

    #[test]
    fn wedge_solution_is_homogeneous(alpha in 0.3f64..PI, a in 0.05f64..1.0, lam in 0.01f64..100.0) {
        let p = solve_wedge(alpha, 64).unwrap();
        let b = 0.3;
        let u1 = f_v(&p, a, b).unwrap();
        let u2 = f_v(&p, lam * a, lam * b).unwrap();
        prop_assert!((u2 * lam.sqrt() / u1 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cap_profiles_have_positive_distance_ratio(alpha in 0.3f64..(0.9 * PI)) {
        let p = solve_cap(3, alpha, 256).unwrap();
        let (c3, c4) = p.rho_bounds();
        prop_assert!(c3 > 0.0 && c4.is_finite());
        prop_assert!(p.rho.iter().all(|r| *r >= 0.0));
    }

    #[test]
    fn example1_map_round_trips(c in 0.01f64..0.1, x in proptest::collection::vec(-0.3f64..0.3, 3)) {
        let map = example1_map(c, 3).unwrap();
        let y = map.forward(&x).unwrap();
        let back = map.inverse(&y).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mobius_map_round_trips(r in 0.5f64..4.0, x in proptest::collection::vec(-0.1f64..0.1, 3)) {
        let map = DiffeoMap::mobius_ball(3, r).unwrap();
        let back = map.inverse(&map.forward(&x).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn config_hash_tracks_content(seed in any::<u64>()) {
        let mut a = ExperimentConfig::default();
        a.seed = seed;
        let mut b = a.clone();
        prop_assert_eq!(a.hash(), b.hash());
        b.seed = seed.wrapping_add(1);
        prop_assert_ne!(a.hash(), b.hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn first_order_coefficient_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, p1 in 0.5f64..3.0) {
        let p = solve_cap(3, PI / 2.0, 64).unwrap();
        let basis = ModeBasis::new(&p, 0, 8).unwrap();
        let g1: Vec<f64> = p.theta.iter().map(|t| t.cos().powf(p1)).collect();
        let g2: Vec<f64> = p.theta.iter().map(|t| 1.0 + t.sin().powi(2)).collect();
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
        let c1 = first_order_coefficient(&p, &g1, &basis, DEFAULT_BLEND).unwrap();
        let c2 = first_order_coefficient(&p, &g2, &basis, DEFAULT_BLEND).unwrap();
        let cm = first_order_coefficient(&p, &mix, &basis, DEFAULT_BLEND).unwrap();
        let scale = c1.c1_sup.abs() * a.abs() + c2.c1_sup.abs() * b.abs() + 1e-12;
        for i in 0..p.len() {
            prop_assert!((cm.c1[i] - a * c1.c1[i] - b * c2.c1[i]).abs() < 1e-8 * scale);
        }
    }
}
