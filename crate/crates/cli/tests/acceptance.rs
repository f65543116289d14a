//! Acceptance criteria 1–13. Each test prints one PASS/FAIL line.

use std::f64::consts::PI;
use std::sync::Mutex;
use std::time::Instant;

use conelab::cone_profiles::{cap_fd, solve_cap, solve_wedge, wedge_fd, RadialProfile};
use conelab::domain_solver::{
    barrier_certify, barrier_search, ingredient_bounds, solve_axisymmetric, solve_ball, BoundaryData, MeridianDomain,
};
use conelab::expansion::{
    build_cutoff_c, compute_f, first_order_coefficient, first_order_from_source, solve_l0, DegenerateOperator, ModeBasis,
    DEFAULT_BLEND,
};
use conelab::geometry::{example1_map, example5_map, DiffeoMap};
use conelab::harness::{self, ExperimentConfig, Status};
use conelab::spectral::{cap_eigenpairs, mu1};
use conelab::sphere_fields::{compare_with_wedge, rho_bounds, solve_rho_2d, SphericalDomain};

static SERIAL: Mutex<()> = Mutex::new(());

struct Check {
    id: &'static str,
    title: &'static str,
    start: Instant,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Check {
    fn new(id: &'static str, title: &'static str) -> Self {
        Self {
            id,
            title,
            start: Instant::now(),
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn expect(&mut self, ok: bool, what: String) {
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn runtime(&mut self, limit: f64) {
        let t = self.start.elapsed().as_secs_f64();
        self.expect(t < limit, format!("runtime {t:.2} s < {limit} s"));
    }

    fn finish(self) {
        let t = self.start.elapsed().as_secs_f64();
        let tag = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        let mut detail = self.failures.clone();
        detail.extend(self.notes.iter().cloned());
        println!("{tag} criterion {} ({}) [{t:.2} s]: {}", self.id, self.title, detail.join("; "));
        assert!(self.failures.is_empty(), "criterion {} failed: {:?}", self.id, self.failures);
    }
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn sup_interior(p: &RadialProfile, exact: impl Fn(f64) -> f64) -> f64 {
    let xi = p.xi();
    p.interior_range()
        .map(|i| (xi[i] - exact(p.theta[i])).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_01_exact_wedge() {
    let _g = lock();
    let mut c = Check::new("1", "exact wedge");
    let p = solve_wedge(PI, 512).unwrap();
    let e = sup_interior(&p, |t| t.sin().powf(-0.5));
    c.runtime(1.0);
    c.expect(e < 1e-6, format!("sup |eta - sin^-1/2| = {e:.3e} < 1e-6"));
    c.finish();
}

#[test]
fn criterion_02_exact_cap() {
    let _g = lock();
    let mut c = Check::new("2", "exact hemisphere cap");
    for n in [3usize, 4] {
        let k = (n as f64 - 2.0) / 2.0;
        let p = solve_cap(n, PI / 2.0, 512).unwrap();
        let e = sup_interior(&p, |t| t.cos().powf(-k));
        c.expect(e < 1e-5, format!("n={n}: sup |xi - cos^-(n-2)/2| = {e:.3e} < 1e-5"));
    }
    c.runtime(1.0);
    c.finish();
}

#[test]
fn criterion_03_exact_ball() {
    let _g = lock();
    let mut c = Check::new("3", "exact ball");
    for (n, s) in [(3usize, 1.0), (4, 0.5), (5, 2.0)] {
        let b = solve_ball(n, s, 512).unwrap();
        let k = (n as f64 - 2.0) / 2.0;
        let u = b.u();
        let m = b.r.len();
        let abs = (0..m - 1)
            .map(|i| (u[i] - (2.0 * s / (s * s - b.r[i] * b.r[i])).powf(k)).abs())
            .fold(0.0, f64::max);
        c.expect(abs < 1e-6, format!("n={n}, s={s}: sup |u - u_s| = {abs:.3e} < 1e-6"));
    }
    c.runtime(1.0);
    c.finish();
}

#[test]
fn criterion_04_hemisphere_spectrum() {
    let _g = lock();
    let mut c = Check::new("4", "hemisphere spectrum");
    for n in [3usize, 4] {
        let nf = n as f64;
        let p = solve_cap(n, PI / 2.0, 256).unwrap();
        let (_, pairs) = cap_eigenpairs(&p, 0, 2).unwrap();
        let l1 = pairs[0].lambda;
        let exact = (nf + 2.0) * (3.0 * nf - 2.0) / 4.0;
        let mu = mu1(l1, n).unwrap();
        c.expect((l1 / exact - 1.0).abs() < 1e-3, format!("n={n}: lambda1 = {l1:.6} vs {exact}"));
        c.expect((mu / nf - 1.0).abs() < 1e-3, format!("n={n}: mu1 = {mu:.6}"));
        if n == 3 {
            c.expect(l1 > 0.75, format!("lambda1 = {l1:.4} > 3/4"));
        }
    }
    c.runtime(10.0);
    c.finish();
}

#[test]
fn criterion_05_rho_invariants() {
    let _g = lock();
    let mut c = Check::new("5", "rho bounds and boundary slope");
    let mut profiles: Vec<(String, Box<dyn Fn(usize) -> RadialProfile>)> = Vec::new();
    for a in [PI / 3.0, PI / 2.0, 2.0 * PI / 3.0, PI] {
        profiles.push((format!("wedge {a:.3}"), Box::new(move |m| solve_wedge(a, m).unwrap())));
    }
    for a in [PI / 3.0, PI / 2.0, 0.8 * PI] {
        profiles.push((format!("cap {a:.3}"), Box::new(move |m| solve_cap(3, a, m).unwrap())));
    }
    for (name, make) in &profiles {
        let mut defects = Vec::new();
        for m in [128usize, 256, 512] {
            let p = make(m);
            let (c3, c4) = p.rho_bounds();
            c.expect(c3 > 0.0 && c4.is_finite(), format!("{name} N={m}: c3 = {c3:.3}, c4 = {c4:.3}"));
            defects.push(p.endpoint_slopes().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max));
        }
        let last = defects[defects.len() - 1];
        c.expect(
            last < 5e-3 && last <= defects[0] + 1e-12,
            format!(
                "{name}: slope defects {}",
                defects.iter().map(|d| format!("{d:.1e}")).collect::<Vec<_>>().join(", ")
            ),
        );
    }
    for (name, d) in [
        ("sphere cap", SphericalDomain::cap(PI / 3.0, 128, 16).unwrap()),
        ("sphere lune", SphericalDomain::lune(2.0 * PI / 3.0, 96, 96).unwrap()),
    ] {
        let s = solve_rho_2d(&d).unwrap();
        let (c3, c4) = rho_bounds(&d, &s.rho);
        c.expect(c3 > 0.0 && c4.is_finite(), format!("{name}: c3 = {c3:.3}, c4 = {c4:.3}"));
    }
    c.finish();
}

#[test]
fn criterion_06_lune_consistency() {
    let _g = lock();
    let mut c = Check::new("6", "lune against wedge product");
    let alpha = 2.0 * PI / 3.0;
    let d = SphericalDomain::lune(alpha, 256, 256).unwrap();
    let s = solve_rho_2d(&d).unwrap();
    let w = solve_wedge(alpha, 512).unwrap();
    let e = compare_with_wedge(&d, &s.rho, &w).unwrap();
    c.runtime(60.0);
    c.expect(e < 1e-4, format!("sup |rho - sin * rho_wedge| = {e:.3e} < 1e-4"));
    c.finish();
}

fn report_line(c: &mut Check, r: &harness::Report) {
    for k in &r.criteria {
        c.expect(
            k.status == Status::Pass,
            format!("{}: {:.4e} ({} {:.4e})", k.name, k.value, k.detail, k.threshold),
        );
    }
}

#[test]
fn criterion_07_first_order_rate() {
    let _g = lock();
    let mut c = Check::new("7", "ratio rate on a perturbed cone");
    let mut config = ExperimentConfig::default();
    config.theorem1.retain(|k| k.map == "example1:0.05" && (k.alpha - PI / 3.0).abs() < 1e-12);
    assert_eq!(config.theorem1.len(), 1);
    assert_eq!(config.meridian_resolution, 512);
    let out = harness::run_theorem1(&config).unwrap();
    report_line(&mut c, &out.report);
    c.runtime(300.0);
    c.finish();
}

#[test]
fn criterion_08_remainder_rate() {
    let _g = lock();
    let mut c = Check::new("8", "remainder rate after the first-order term");
    let config = ExperimentConfig::default();
    let out = harness::run_theorem2(&config).unwrap();
    report_line(&mut c, &out.report);
    let mus: Vec<f64> = config
        .theorem2
        .iter()
        .filter_map(|k| out.report.stages[format!("{}/spectrum", k.label)]["mu1"].as_f64())
        .collect();
    c.expect(mus.iter().any(|m| *m > 2.0) && mus.iter().any(|m| *m < 2.0), format!("mu1 values {mus:.4?}"));
    c.runtime(600.0);
    c.finish();
}

#[test]
fn criterion_09_first_order_pipeline() {
    let _g = lock();
    let mut c = Check::new("9", "first-order coefficient pipeline");
    let p = solve_cap(3, PI / 2.0, 256).unwrap();
    let n = 3.0;
    for (name, map) in [("example5", example5_map(3).unwrap()), ("ball:1", DiffeoMap::mobius_ball(3, 1.0).unwrap())] {
        let src = compute_f(&map, &p, 16).unwrap();
        let fo = first_order_from_source(&p, &src, 3, DEFAULT_BLEND).unwrap();
        c.expect(fo.residual() < 1e-5, format!("{name}: residual {:.2e}", fo.residual()));
        for part in fo.parts() {
            let finite = part.c1.iter().all(|v| v.is_finite());
            c.expect(finite, format!("{name} m={}: xi1/xi bounded by {:.3}", part.mode, part.c1_sup));
            let limit = 4.0 / n * part.c_bar * 1.05;
            c.expect(
                part.step1_sup <= limit,
                format!("{name} m={}: step-1 sup {:.4} <= {:.4}", part.mode, part.step1_sup, limit),
            );
        }
    }
    let basis = ModeBasis::new(&p, 1, 10).unwrap();
    let g1: Vec<f64> = p.theta.iter().map(|t| t.sin() * (1.0 + t.cos())).collect();
    let g2: Vec<f64> = p.theta.iter().map(|t| t.sin().powi(3)).collect();
    let mix: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| 2.0 * a - 0.7 * b).collect();
    let a = first_order_coefficient(&p, &g1, &basis, DEFAULT_BLEND).unwrap();
    let b = first_order_coefficient(&p, &g2, &basis, DEFAULT_BLEND).unwrap();
    let m = first_order_coefficient(&p, &mix, &basis, DEFAULT_BLEND).unwrap();
    let scale = m.c1_sup.max(1e-300);
    let lin = (0..p.len())
        .map(|i| (m.c1[i] - 2.0 * a.c1[i] + 0.7 * b.c1[i]).abs())
        .fold(0.0, f64::max)
        / scale;
    c.expect(lin < 1e-8, format!("linearity defect {lin:.2e} < 1e-8"));
    c.finish();
}

#[test]
fn criterion_10a_wedge_ratio_homogeneity() {
    let _g = lock();
    let mut c = Check::new("10a", "thin-wedge ratio is s-independent");
    let config = ExperimentConfig::default();
    let out = harness::run_example51(&config).unwrap();
    let k = out.report.criteria.iter().find(|k| k.name == "s_independence").unwrap();
    c.expect(k.status == Status::Pass, format!("max spread over s = {:.3e} <= 1e-6", k.value));
    c.runtime(10.0);
    c.finish();
}

#[test]
fn criterion_10b_wedge_ratio_deviation() {
    let _g = lock();
    let mut c = Check::new("10b", "thin-wedge ratio departs from one");
    let config = ExperimentConfig::default();
    let out = harness::run_example51(&config).unwrap();
    let k = out.report.criteria.iter().find(|k| k.name == "max_deviation").unwrap();
    c.expect(k.status == Status::Pass, format!("max |ratio - 1| = {:.3e} > 0.01", k.value));
    c.runtime(10.0);
    c.finish();
}

#[test]
fn criterion_11_source_boundary_behaviour() {
    let _g = lock();
    let mut c = Check::new("11", "source slope and no-decay band");
    let config = ExperimentConfig::default();
    let out = harness::run_example52(&config).unwrap();
    for name in ["source_slope", "no_decay_band_ratio", "mu1_above_one"] {
        let k = out.report.criteria.iter().find(|k| k.name == name).unwrap();
        c.expect(k.status == Status::Pass, format!("{name} = {:.4}", k.value));
    }
    c.runtime(120.0);
    c.finish();
}

#[test]
fn criterion_12_barrier() {
    let _g = lock();
    let mut c = Check::new("12", "barrier certification");
    let half = solve_cap(3, PI / 2.0, 256).unwrap();
    let third = solve_cap(3, PI / 3.0, 256).unwrap();
    let id = DiffeoMap::identity(3);
    let zero = barrier_certify(&half, &id, 0.0, 0.0, 0.05).unwrap();
    c.expect(zero.max_residual.abs() < 1e-8, format!("A = B = 0 residual {:.1e}", zero.max_residual));
    for (name, p) in [("half-space", &half), ("pi/3 cone", &third)] {
        for map in [id.clone(), example1_map(0.05, 3).unwrap()] {
            let s = barrier_search(p, &map).unwrap();
            match &s.found {
                Some(r) => c.expect(
                    r.max_residual <= 0.0,
                    format!("{name}, {}: B = {}, radius = {:.3e}", map.name(), r.b, r.radius),
                ),
                None => c.expect(false, format!("{name}, {}: no barrier in {} attempts", map.name(), s.attempts)),
            }
        }
        let ing = ingredient_bounds(p).unwrap();
        c.expect(
            ing.c1.is_finite() && ing.upper_ok,
            format!("{name}: C1 = {:.3}, max d^(n-2)/2 u_V = {:.4}", ing.c1, ing.upper),
        );
    }
    c.finish();
}

fn order(label: &str, c: &mut Check, e1: f64, e2: f64) {
    let q = e1 / e2;
    c.expect((3.6..=4.4).contains(&q), format!("{label}: {e1:.3e} / {e2:.3e} = {q:.3}"));
}

#[test]
fn criterion_13_convergence_orders() {
    let _g = lock();
    let mut c = Check::new("13", "second-order grid convergence");

    let wedge = |m: usize| {
        let p = wedge_fd(PI, m).unwrap();
        p.theta.iter().zip(&p.rho).map(|(t, r)| (r - t.sin()).abs()).fold(0.0, f64::max)
    };
    order("wedge", &mut c, wedge(64), wedge(128));

    let reference = solve_cap(3, PI / 3.0, 512).unwrap();
    let cap = |m: usize| {
        let p = cap_fd(3, PI / 3.0, m).unwrap();
        p.theta
            .iter()
            .zip(&p.rho)
            .map(|(t, r)| (r - reference.interp(*t).unwrap().0).abs())
            .fold(0.0, f64::max)
    };
    order("cap", &mut c, cap(64), cap(128));

    let sphere = |m: usize| {
        let d = SphericalDomain::cap(PI / 3.0, m, 16).unwrap();
        let s = solve_rho_2d(&d).unwrap();
        let mut e = 0.0f64;
        for k in 0..d.n_nodes() {
            let t = d.theta[d.coords[k].0];
            e = e.max((s.rho.values[k] - reference.interp(t.min(PI / 3.0)).unwrap().0).abs());
        }
        e
    };
    order("sphere", &mut c, sphere(32), sphere(64));

    let hemi = solve_cap(3, PI / 2.0, 256).unwrap();
    let meridian = |m: usize| {
        let map = DiffeoMap::mobius_ball(3, 1.0).unwrap();
        let d = MeridianDomain::new(3, PI / 2.0, map, 1e-3, 0.5, m, m).unwrap();
        solve_axisymmetric(&d, &hemi, BoundaryData::ExactBall).unwrap().exact_ball_error().unwrap()
    };
    order("meridian", &mut c, meridian(48), meridian(96));

    let eigen = |m: usize| {
        let p = solve_cap(3, PI / 2.0, m).unwrap();
        (cap_eigenpairs(&p, 0, 1).unwrap().1[0].lambda - 8.75).abs()
    };
    order("eigen", &mut c, eigen(64), eigen(128));

    let l0 = |m: usize| {
        let p = solve_cap(3, PI / 2.0, m).unwrap();
        let cut = build_cutoff_c(&p.rho, 3, DEFAULT_BLEND).unwrap();
        let op = DegenerateOperator::new(&p, cut.clone(), 0).unwrap();
        let exact = |t: f64| 1.0 + 0.3 * (2.0 * t).cos();
        let g: Vec<f64> = p
            .theta
            .iter()
            .zip(&cut)
            .map(|(&t, &cv)| {
                let r = t.cos();
                let r1 = -t.sin();
                let v1 = -0.6 * (2.0 * t).sin();
                let v2 = -1.2 * (2.0 * t).cos();
                let lap = if t < 1e-12 { 2.0 * v2 } else { v2 + t.cos() / t.sin() * v1 };
                r * r * lap - r * r1 * v1 + (0.25 * r * r + 0.75 + cv) * exact(t)
            })
            .collect();
        let sol = solve_l0(&op, &g, 0.75).unwrap();
        p.theta.iter().zip(&sol.v).map(|(t, v)| (v - exact(*t)).abs()).fold(0.0, f64::max)
    };
    order("degenerate operator", &mut c, l0(64), l0(128));

    let ball = solve_ball(3, 1.0, 64).unwrap().u_error();
    c.expect(ball < 1e-12, format!("ball: exact on every grid ({ball:.1e})"));
    c.finish();
}
