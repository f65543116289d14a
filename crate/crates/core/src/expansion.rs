//! First-order expansion of the blow-up solution: the cutoff coefficient, the
//! degenerate operator `L₀ = ρ²Δ_θ + c`, the source term `F`, the split solve
//! for `ξ₁`, and the supersolutions built from it.
//!
//! Everything here works on a rotational cap one azimuthal mode at a time.
//! `L₀` is discretized in the normalized form `v = u/ξ`, in which the equation
//! stays bounded up to `∂Σ`.

use serde::Serialize;

use crate::cone_profiles::{cap_cartesian, interp_uniform, ConeJet, EndpointKind, ProfileKind, RadialProfile};
use crate::error::{Error, Result, StageExt};
use crate::geometry::{DiffeoMap, MapKind};
use crate::linalg::{Csr, SparseLu, Triplets};
use crate::spectral::{cap_eigenpairs, resolvent_direct, resolvent_solve, EigenPair, SingularOperator};

/// `ρ₀ = √(n/2)`.
pub fn rho0(n: usize) -> f64 {
    (n as f64 / 2.0).sqrt()
}

/// `−(n(n+2)/4)(1 + ((n−4)/(n+2))ρ²)`, the coefficient of the `ξ₁` equation.
pub fn c_formula(rho: f64, n: usize) -> f64 {
    let nf = n as f64;
    -nf * (nf + 2.0) / 4.0 - nf * (nf - 4.0) / 4.0 * rho * rho
}

/// `−((n−2)²/4)ρ² − n(n−1)/4`, the upper bound `c` must respect.
pub fn c_bound(rho: f64, n: usize) -> f64 {
    let nf = n as f64;
    -(nf - 2.0).powi(2) / 4.0 * rho * rho - nf * (nf - 1.0) / 4.0
}

pub const DEFAULT_BLEND: f64 = 0.1;

/// Cutoff coefficient: `c_formula` below `(1−δ_b)ρ₀`, `c_bound` above `ρ₀`, and
/// a cubic Hermite blend in between.
pub fn build_cutoff_c(rho: &[f64], n: usize, delta_b: f64) -> Result<Vec<f64>> {
    if !(delta_b > 0.0 && delta_b < 1.0) {
        return Err(Error::invalid(format!("blend width {delta_b} outside (0, 1)")));
    }
    let r0 = rho0(n);
    let r1 = (1.0 - delta_b) * r0;
    rho.iter()
        .map(|&r| {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::domain(format!("ρ = {r} is not a valid profile value")));
            }
            Ok(if r <= r1 {
                c_formula(r, n)
            } else if r >= r0 {
                c_bound(r, n)
            } else {
                let t = (r - r1) / (r0 - r1);
                let w = t * t * (3.0 - 2.0 * t);
                (1.0 - w) * c_formula(r, n) + w * c_bound(r, n)
            })
        })
        .collect()
}

/// `L₀ = ρ²(Δ_θ − m(m+n−3)/sin²θ) + c` on a cap grid, acting on `u = ξv`.
#[derive(Debug, Clone)]
pub struct DegenerateOperator {
    pub n: usize,
    pub mode: usize,
    pub theta: Vec<f64>,
    pub rho: Vec<f64>,
    pub c: Vec<f64>,
    /// `(λ, Λ)` of the principal part in an orthonormal frame.
    pub ellipticity: (f64, f64),
    h: f64,
    drho: Vec<f64>,
    lap: crate::cone_profiles::CapLaplacian,
}

impl DegenerateOperator {
    pub fn new(profile: &RadialProfile, c: Vec<f64>, mode: usize) -> Result<Self> {
        if profile.kind != ProfileKind::Cap || profile.left != EndpointKind::RegularCenter {
            return Err(Error::invalid("the degenerate operator needs a cap profile"));
        }
        if c.len() != profile.len() {
            return Err(Error::invalid("coefficient size does not match the profile"));
        }
        let big_n = profile.len() - 1;
        let lap = crate::cone_profiles::CapLaplacian::new(profile.n, profile.alpha, big_n);
        let h = lap.h;
        let r = &profile.rho;
        let drho: Vec<f64> = (0..=big_n)
            .map(|i| match i {
                0 => 0.0,
                _ if i == big_n => (3.0 * r[i] - 4.0 * r[i - 1] + r[i - 2]) / (2.0 * h),
                _ => (r[i + 1] - r[i - 1]) / (2.0 * h),
            })
            .collect();
        Ok(Self {
            n: profile.n,
            mode,
            theta: profile.theta.clone(),
            rho: profile.rho.clone(),
            c,
            ellipticity: (1.0, 1.0),
            h,
            drho,
            lap,
        })
    }

    fn k(&self) -> f64 {
        (self.n as f64 - 2.0) / 2.0
    }

    fn big_n(&self) -> usize {
        self.theta.len() - 1
    }

    /// `L₀ξ/ξ = k²ρ² + k(k+1) + c`.
    pub fn zeroth_order(&self, i: usize) -> f64 {
        let k = self.k();
        k * k * self.rho[i] * self.rho[i] + k * (k + 1.0) + self.c[i]
    }

    /// Largest `L₀ξ/ξ` over the grid; `ξ` is a supersolution with margin `δ`
    /// when this is at most `−δ`.
    pub fn supersolution_margin(&self) -> f64 {
        (0..self.theta.len()).map(|i| self.zeroth_order(i)).fold(f64::NEG_INFINITY, f64::max)
    }

    fn potential(&self, i: usize) -> f64 {
        let m = self.mode as f64;
        if self.mode == 0 || i == 0 {
            0.0
        } else {
            m * (m + self.n as f64 - 3.0) / self.theta[i].sin().powi(2)
        }
    }

    fn dirichlet_center(&self) -> bool {
        self.mode > 0
    }

    /// Row `(lower, diag, upper)` of `L₀(ξv)/ξ` at node `i` of the full grid.
    fn row(&self, i: usize) -> (f64, f64, f64) {
        let big_n = self.big_n();
        let q = self.zeroth_order(i);
        if i == big_n {
            return (0.0, q, 0.0);
        }
        if i == 0 && self.dirichlet_center() {
            return (0.0, 1.0, 0.0);
        }
        let r = self.rho[i];
        let (lo, d, up) = self.lap.row(i);
        let drift = -2.0 * self.k() * r * self.drho[i] / (2.0 * self.h);
        let lo = if i == 0 { 0.0 } else { r * r * lo - drift };
        (lo, r * r * (d - self.potential(i)) + q, r * r * up + drift)
    }

    /// Row for the last interior node `i` when the zero-data boundary sits a
    /// distance `s ≤ h` to its right.
    fn cut_row(&self, i: usize, s: f64) -> (f64, f64) {
        let h = self.h;
        let r = self.rho[i];
        let t = self.theta[i];
        let d1 = [-s / (h * (h + s)), (s - h) / (h * s)];
        let d2 = [2.0 / (h * (h + s)), -2.0 / (h * s)];
        let cot = (self.n as f64 - 2.0) * t.cos() / t.sin();
        let drift = -2.0 * self.k() * r * self.drho[i];
        let lo = r * r * (d2[0] + cot * d1[0]) + drift * d1[0];
        let d = r * r * (d2[1] + cot * d1[1] - self.potential(i)) + drift * d1[1] + self.zeroth_order(i);
        (lo, d)
    }

    pub fn matrix(&self) -> Csr {
        let m = self.theta.len();
        let mut t = Triplets::with_capacity(m, m, 3 * m);
        for i in 0..m {
            let (lo, d, up) = self.row(i);
            if i > 0 {
                t.push(i, i - 1, lo);
            }
            t.push(i, i, d);
            if i + 1 < m {
                t.push(i, i + 1, up);
            }
        }
        t.to_csr()
    }

    /// `L₀(ξv)/ξ` on the full grid.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matrix().matvec(v)
    }

    fn rhs(&self, g: &[f64]) -> Vec<f64> {
        let mut b = g.to_vec();
        if self.dirichlet_center() {
            b[0] = 0.0;
        }
        b
    }

    fn solve_full(&self, g: &[f64]) -> Result<Vec<f64>> {
        SparseLu::new(&self.matrix())?.solve(&self.rhs(g))
    }

    /// Zero-data solve on `{θ < α − t}`.
    fn solve_cut(&self, g: &[f64], t: f64) -> Result<Vec<f64>> {
        let h = self.h;
        let b = self.theta[self.big_n()] - t;
        let last = ((b / h - 1e-9).ceil() as usize).saturating_sub(1);
        if last < 2 {
            return Err(Error::invalid("exhaustion level leaves too few nodes"));
        }
        let s = b - self.theta[last];
        let m = last + 1;
        let mut tr = Triplets::with_capacity(m, m, 3 * m);
        for i in 0..last {
            let (lo, d, up) = self.row(i);
            if i > 0 {
                tr.push(i, i - 1, lo);
            }
            tr.push(i, i, d);
            tr.push(i, i + 1, up);
        }
        let (lo, d) = self.cut_row(last, s);
        tr.push(last, last - 1, lo);
        tr.push(last, last, d);
        let rhs = self.rhs(&g[..m]);
        tr.to_csr().solve(&rhs)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExhaustionLevel {
    /// The level's domain is `{d_Σ > t}`.
    pub t: f64,
    pub sup: f64,
    /// Sup distance to the previous level on the fixed compact `{ρ ≥ ρ_max/10}`.
    pub change: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct L0Solution {
    /// `v = u/ξ` on the full grid.
    pub v: Vec<f64>,
    pub levels: Vec<ExhaustionLevel>,
    /// `‖v‖_∞`.
    pub sup: f64,
    /// `(1/δ)‖g‖_∞`.
    pub bound: f64,
    /// Whether the last change is below `1e−5`.
    pub cauchy: bool,
}

pub const EXHAUSTION_LEVELS: usize = 6;
pub const BOUND_SLACK: f64 = 0.05;
/// Level changes below this fraction of `(1/δ)‖g‖` are discretization noise.
pub const CONTRACTION_FLOOR: f64 = 1e-6;

/// Solves `L₀u = f` with `ψ = ξ` for the normalized unknown `v = u/ξ`, given
/// `g = f/ξ` on every node (its boundary limit at the last node).
///
/// The shrinking zero-data levels `{d_Σ > 4h·2^{−k}}` are solved and reported;
/// the returned field is the solve on the whole grid, in which the boundary row
/// is the algebraic limit of the equation.
pub fn solve_l0(op: &DegenerateOperator, g: &[f64], delta: f64) -> Result<L0Solution> {
    if g.len() != op.theta.len() {
        return Err(Error::invalid("source size does not match the operator"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("f/ψ must be bounded"));
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("δ must be positive"));
    }
    let margin = op.supersolution_margin();
    if margin > -delta + 1e-12 {
        return Err(Error::Certification(format!(
            "L₀ψ/ψ reaches {margin:.4e}, above −δ = {:.4e}",
            -delta
        )));
    }
    let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let bound = gmax / delta;
    let rmax = op.rho.iter().cloned().fold(0.0, f64::max);
    let compact: Vec<usize> = (0..op.theta.len()).filter(|&i| op.rho[i] >= 0.1 * rmax).collect();
    let mut levels = Vec::with_capacity(EXHAUSTION_LEVELS);
    let mut prev: Option<Vec<f64>> = None;
    for k in 0..EXHAUSTION_LEVELS {
        let t = 4.0 * op.h * 0.5f64.powi(k as i32);
        let v = op.solve_cut(g, t)?;
        let sup = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if sup > bound * (1.0 + BOUND_SLACK) + 1e-14 {
            return Err(Error::Certification(format!(
                "level {k}: ‖v‖ = {sup:.4e} exceeds (1/δ)‖g‖ = {bound:.4e}"
            )));
        }
        let change = prev.as_ref().map(|p| {
            compact
                .iter()
                .filter(|&&i| i < p.len() && i < v.len())
                .map(|&i| (v[i] - p[i]).abs())
                .fold(0.0, f64::max)
        });
        levels.push(ExhaustionLevel { t, sup, change });
        prev = Some(v);
    }
    let changes: Vec<f64> = levels.iter().filter_map(|l| l.change).collect();
    let last = *changes.last().unwrap();
    let before = changes[changes.len() - 2];
    if last > CONTRACTION_FLOOR * bound && last > 0.75 * before {
        return Err(Error::Certification(format!(
            "exhaustion iterates are not contracting ({before:.3e} → {last:.3e})"
        )));
    }
    let v = op.solve_full(g)?;
    let sup = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if sup > bound * (1.0 + BOUND_SLACK) + 1e-14 {
        return Err(Error::Certification(format!(
            "‖u/ψ‖ = {sup:.4e} exceeds (1/δ)‖f/ψ‖ = {bound:.4e}"
        )));
    }
    Ok(L0Solution {
        v,
        levels,
        sup,
        bound,
        cauchy: last < 1e-5,
    })
}

/// The source `F = −r^{n/2}(a_{ij,k}y_k ∂_{ij}u_V + b_{i,0}∂_i u_V)` sampled on a
/// `(θ, φ)` grid of a three-dimensional cap.
#[derive(Debug, Clone)]
pub struct SourceField {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    /// `values[i][j] = F(θ_i, φ_j)`; NaN on the boundary ring.
    pub values: Vec<Vec<f64>>,
    /// `max |F|/ξ⁵` over interior nodes.
    pub c_bar: f64,
    /// Largest relative change of `F` between `r = 1` and `r = 1/2`.
    pub homogeneity_error: f64,
}

pub const HOMOGENEITY_TOL: f64 = 1e-10;

fn source_at(map: &DiffeoMap, profile: &RadialProfile, a: &[nalgebra::DMatrix<f64>], b: &nalgebra::DVector<f64>, r: f64, t: f64, p: f64) -> Result<f64> {
    let y = [r * t.sin() * p.cos(), r * t.sin() * p.sin(), r * t.cos()];
    let _ = map;
    let (_, g, h) = profile.cartesian_jet(&y)?;
    let mut s = 0.0;
    for (k, ak) in a.iter().enumerate() {
        s += y[k] * ak.component_mul(&h).sum();
    }
    s += b.dot(&g);
    Ok(-r.powf(1.5) * s)
}

/// Samples `F` for `map` on the cap of `profile` (`n = 3`) with `n_phi` azimuths.
pub fn compute_f(map: &DiffeoMap, profile: &RadialProfile, n_phi: usize) -> Result<SourceField> {
    if profile.n != 3 || map.n != 3 || profile.kind != ProfileKind::Cap {
        return Err(Error::invalid("the source term is sampled for three-dimensional caps"));
    }
    if n_phi < 4 {
        return Err(Error::invalid("need at least four azimuths"));
    }
    let (a, b) = map.taylor_coefficients()?;
    let big_n = profile.len() - 1;
    let phi: Vec<f64> = (0..n_phi).map(|j| 2.0 * std::f64::consts::PI * j as f64 / n_phi as f64).collect();
    let xi = profile.xi();
    let mut values = vec![vec![f64::NAN; n_phi]; big_n + 1];
    let mut c_bar = 0.0f64;
    let mut homog = 0.0f64;
    for i in 0..big_n {
        let t = profile.theta[i];
        for (j, &p) in phi.iter().enumerate() {
            let f1 = source_at(map, profile, &a, &b, 1.0, t, p)?;
            let f2 = source_at(map, profile, &a, &b, 0.5, t, p)?;
            let scale = f1.abs().max(xi[i].powi(5));
            homog = homog.max((f1 - f2).abs() / scale);
            values[i][j] = f1;
            c_bar = c_bar.max(f1.abs() / xi[i].powi(5));
        }
    }
    if homog > HOMOGENEITY_TOL {
        return Err(Error::Certification(format!(
            "F changes by {homog:.3e} between radii; its derivative order is inconsistent"
        )));
    }
    Ok(SourceField {
        theta: profile.theta.clone(),
        phi,
        values,
        c_bar,
        homogeneity_error: homog,
    })
}

impl SourceField {
    /// Coefficients of `cos mφ` and `sin mφ` per ring (NaN on the boundary).
    pub fn mode(&self, m: usize) -> (Vec<f64>, Vec<f64>) {
        let np = self.phi.len();
        let norm = if m == 0 { 1.0 / np as f64 } else { 2.0 / np as f64 };
        self.values
            .iter()
            .map(|row| {
                let mut c = 0.0;
                let mut s = 0.0;
                for (v, p) in row.iter().zip(&self.phi) {
                    c += v * (m as f64 * p).cos();
                    s += v * (m as f64 * p).sin();
                }
                (c * norm, s * norm)
            })
            .unzip()
    }

    /// `g = ρ²F_m/ξ` for one Fourier component, with the boundary value
    /// extrapolated quadratically.
    pub fn normalized_mode(&self, profile: &RadialProfile, m: usize, sine: bool) -> Vec<f64> {
        let (c, s) = self.mode(m);
        let f = if sine { s } else { c };
        normalize_source(profile, &f)
    }

    /// `sup_θ |ρ²F_m/ξ|` for `m = 0..=m_max`, cosine and sine parts combined.
    pub fn mode_magnitudes(&self, profile: &RadialProfile, m_max: usize) -> Vec<f64> {
        (0..=m_max)
            .map(|m| {
                let a = self.normalized_mode(profile, m, false);
                let b = self.normalized_mode(profile, m, true);
                a.iter().chain(&b).fold(0.0f64, |x, v| x.max(v.abs()))
            })
            .collect()
    }
}

/// `ρ²F/ξ` on interior nodes with the boundary value extrapolated.
pub fn normalize_source(profile: &RadialProfile, f: &[f64]) -> Vec<f64> {
    let k = (profile.n as f64 - 2.0) / 2.0;
    let big_n = profile.len() - 1;
    let mut g: Vec<f64> = (0..=big_n)
        .map(|i| {
            let r = profile.rho[i];
            if i == big_n {
                0.0
            } else {
                r * r * f[i] * r.powf(k)
            }
        })
        .collect();
    g[big_n] = 3.0 * g[big_n - 1] - 3.0 * g[big_n - 2] + g[big_n - 3];
    g
}

/// Eigenpairs of one azimuthal mode, used by the resolvent step.
#[derive(Debug, Clone)]
pub struct ModeBasis {
    pub op: SingularOperator,
    pub pairs: Vec<EigenPair>,
}

impl ModeBasis {
    pub fn new(profile: &RadialProfile, m: usize, k: usize) -> Result<Self> {
        let (op, pairs) = cap_eigenpairs(profile, m, k)?;
        Ok(Self { op, pairs })
    }
}

pub const RESOLVENT_PAIRS: usize = 10;
pub const TAIL_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionCoefficient {
    pub mode: usize,
    pub theta: Vec<f64>,
    /// `c₁ = ξ₁/ξ`.
    pub c1: Vec<f64>,
    /// `ξ̃₁/ξ` from the degenerate step.
    pub v_tilde: Vec<f64>,
    /// `ξ̄₁` from the resolvent step (zero on the boundary).
    pub xi_bar: Vec<f64>,
    /// `‖ρ²F/ξ‖_∞`, the effective `C̄` of this component.
    pub c_bar: f64,
    /// `‖ξ̃₁/ξ‖_∞`.
    pub step1_sup: f64,
    /// `(4/n)C̄`.
    pub step1_limit: f64,
    pub xi_bar_sup: f64,
    pub c1_sup: f64,
    /// Relative residual of the `ξ₁` equation over interior nodes.
    pub residual: f64,
    pub tail: f64,
    pub direct_fallback: bool,
    pub lambda1: f64,
    /// `max (ρ|∇ξ₁| + ρ²|∇²ξ₁|)/ξ` over nodes at least two cells inside.
    pub derivative_constant: f64,
    pub exhaustion: Vec<ExhaustionLevel>,
    pub cauchy: bool,
}

/// Solves `ρ²Δ_θξ₁ − (n(n+2)/4)(1 + ((n−4)/(n+2))ρ²)ξ₁ = ρ²F` for one azimuthal
/// component, given `g = ρ²F/ξ`, by a degenerate solve with the cutoff `c`
/// followed by a resolvent correction.
pub fn first_order_coefficient(profile: &RadialProfile, g: &[f64], basis: &ModeBasis, delta_b: f64) -> Result<ExpansionCoefficient> {
    let n = profile.n;
    let nf = n as f64;
    let m = basis.op.mode.unwrap_or(0);
    let big_n = profile.len() - 1;
    let c = build_cutoff_c(&profile.rho, n, delta_b)?;
    let op = DegenerateOperator::new(profile, c.clone(), m)?;
    let l0 = solve_l0(&op, g, nf / 4.0).stage("degenerate step")?;
    let v = l0.v.clone();
    let xi = profile.xi();
    let lambda = -nf * (nf - 4.0) / 4.0;
    let lambda1 = basis.pairs[0].lambda;
    if !(lambda < lambda1) {
        return Err(Error::Certification(format!(
            "λ = {lambda} is not below λ₁ = {lambda1} for mode {m}"
        )));
    }
    let big_g: Vec<f64> = (0..=big_n)
        .map(|i| {
            let r = profile.rho[i];
            if i == big_n || r == 0.0 {
                0.0
            } else {
                (c[i] - c_formula(r, n)) / (r * r) * xi[i] * v[i]
            }
        })
        .collect();
    let gsup = big_g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let (xi_bar, tail, direct) = if gsup == 0.0 {
        (vec![0.0; big_n + 1], 0.0, false)
    } else {
        let rs = resolvent_solve(&basis.op, lambda, &big_g, &basis.pairs).stage("resolvent step")?;
        if rs.tail > TAIL_TOL {
            (resolvent_direct(&basis.op, lambda, &big_g)?, rs.tail, true)
        } else {
            (rs.u, rs.tail, false)
        }
    };
    let c1: Vec<f64> = (0..=big_n)
        .map(|i| if i == big_n { v[i] } else { v[i] + xi_bar[i] / xi[i] })
        .collect();
    // residual: degenerate part plus the resolvent part divided by ξ
    let l0v = op.apply(&v);
    let l1 = basis.op.apply(&xi_bar);
    let gmax = g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let mut res = 0.0f64;
    for i in 0..big_n {
        if i == 0 && m > 0 {
            continue;
        }
        let r = profile.rho[i];
        let part2 = r * r * (l1[i] + lambda * xi_bar[i] - big_g[i]) / xi[i];
        res = res.max((l0v[i] - g[i] + part2).abs());
    }
    res = res.max((l0v[big_n] - g[big_n]).abs());
    let residual = if gmax > 0.0 { res / gmax } else { res };
    let sup = |x: &[f64]| x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(ExpansionCoefficient {
        mode: m,
        theta: profile.theta.clone(),
        derivative_constant: derivative_constant(profile, &c1, m),
        step1_sup: l0.sup,
        step1_limit: 4.0 / nf * gmax,
        xi_bar_sup: sup(&xi_bar),
        c1_sup: sup(&c1),
        c1,
        v_tilde: v,
        xi_bar,
        c_bar: gmax,
        residual,
        tail,
        direct_fallback: direct,
        lambda1,
        exhaustion: l0.levels,
        cauchy: l0.cauchy,
    })
}

/// Eq-(4.5)-type constant: `max (ρ|∇ξ₁| + ρ²|∇²ξ₁|)/ξ` with `ξ₁ = c₁ξ`.
fn derivative_constant(profile: &RadialProfile, c1: &[f64], m: usize) -> f64 {
    let k = (profile.n as f64 - 2.0) / 2.0;
    let h = profile.h();
    let big_n = profile.len() - 1;
    let mf = m as f64;
    let mut best = 0.0f64;
    for i in 1..big_n.saturating_sub(1) {
        let t = profile.theta[i];
        let (r, r1, r2) = match profile.interp_ode(t) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let c = c1[i];
        let c_1 = (c1[i + 1] - c1[i - 1]) / (2.0 * h);
        let c_2 = (c1[i + 1] - 2.0 * c + c1[i - 1]) / (h * h);
        let grad = (r * c_1 - k * c * r1).abs() + r * mf * c.abs() / t.sin();
        let hess_tt = r * r * c_2 - 2.0 * k * r * r1 * c_1 + c * (k * (k + 1.0) * r1 * r1 - k * r * r2);
        let hess_pp = (t.cos() / t.sin() * (r * r * c_1 - k * c * r * r1) - mf * mf * r * r * c / t.sin().powi(2)).abs();
        best = best.max(grad + hess_tt.abs().max(hess_pp));
    }
    best
}

/// `c₁ = ξ₁/ξ` of one map, assembled from its azimuthal components.
#[derive(Debug, Clone, Serialize)]
pub struct FirstOrder {
    /// `(m, cosine part, sine part)`; parts below the noise floor are omitted.
    pub modes: Vec<(usize, Option<ExpansionCoefficient>, Option<ExpansionCoefficient>)>,
    pub c_bar: f64,
}

impl FirstOrder {
    /// `c₁(θ, φ)`.
    pub fn eval(&self, t: f64, p: f64) -> f64 {
        let mut s = 0.0;
        for (m, a, b) in &self.modes {
            let mf = *m as f64;
            if let Some(a) = a {
                let h = a.theta[1] - a.theta[0];
                s += interp_uniform(&a.c1, h, t, true).0 * (mf * p).cos();
            }
            if let Some(b) = b {
                let h = b.theta[1] - b.theta[0];
                s += interp_uniform(&b.c1, h, t, true).0 * (mf * p).sin();
            }
        }
        s
    }

    pub fn parts(&self) -> impl Iterator<Item = &ExpansionCoefficient> {
        self.modes.iter().flat_map(|(_, a, b)| a.iter().chain(b.iter()))
    }

    /// Worst residual over all components.
    pub fn residual(&self) -> f64 {
        self.parts().map(|c| c.residual).fold(0.0, f64::max)
    }

    /// `‖c₁‖_∞` bound by summing components.
    pub fn sup_bound(&self) -> f64 {
        self.parts().map(|c| c.c1_sup).sum()
    }
}

/// Normalized source modes below this are roundoff.
pub const SOURCE_FLOOR: f64 = 1e-10;

/// Runs `first_order_coefficient` on every Fourier component of `F` up to `m_max`.
pub fn first_order_from_source(profile: &RadialProfile, source: &SourceField, m_max: usize, delta_b: f64) -> Result<FirstOrder> {
    let mags = source.mode_magnitudes(profile, m_max);
    let top = mags.iter().cloned().fold(0.0, f64::max);
    let mut modes = Vec::new();
    for m in 0..=m_max {
        if !(mags[m] > 1e-9 * top && mags[m] > SOURCE_FLOOR) {
            continue;
        }
        let basis = ModeBasis::new(profile, m, RESOLVENT_PAIRS.min(profile.len() - 2))?;
        let part = |sine: bool| -> Result<Option<ExpansionCoefficient>> {
            let g = source.normalized_mode(profile, m, sine);
            let gm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if gm <= 1e-9 * top || (sine && m == 0) {
                return Ok(None);
            }
            first_order_coefficient(profile, &g, &basis, delta_b).map(Some)
        };
        let a = part(false)?;
        let b = part(true)?;
        modes.push((m, a, b));
    }
    Ok(FirstOrder {
        modes,
        c_bar: source.c_bar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthCase {
    /// `μ₁ > 2`.
    Above,
    /// `μ₁ = 2`.
    Critical,
    /// `μ₁ < 2`.
    Below,
}

impl GrowthCase {
    /// `None` when `|μ₁ − 2| < tol` and `μ₁ ≠ 2` cannot be decided.
    pub fn classify(mu1: f64, tol: f64) -> Option<Self> {
        if mu1 == 2.0 {
            Some(GrowthCase::Critical)
        } else if (mu1 - 2.0).abs() < tol {
            None
        } else if mu1 > 2.0 {
            Some(GrowthCase::Above)
        } else {
            Some(GrowthCase::Below)
        }
    }
}

/// The barrier `w = u_V + ξ₁r^{2−n/2} ± (A₀u_Vr² + A₁φ₁R(r))` with `R` set by
/// the case, for an axisymmetric `ξ₁`.
#[derive(Debug, Clone)]
pub struct Supersolution<'a> {
    pub case: GrowthCase,
    pub profile: &'a RadialProfile,
    pub map: &'a DiffeoMap,
    /// `c₁ = ξ₁/ξ` on the profile grid.
    pub c1: &'a [f64],
    pub phi1: &'a [f64],
    pub lambda1: f64,
    pub a0: f64,
    pub a1: f64,
    /// `true` for the supersolution `w`, `false` for the subsolution `w̄`.
    pub upper: bool,
}

impl Supersolution<'_> {
    fn kk(&self) -> f64 {
        (self.profile.n as f64 - 2.0) / 2.0
    }

    fn radial(&self, r: f64) -> (f64, f64, f64) {
        let n = self.profile.n as f64;
        let q = 3.0 - n / 2.0;
        let pw = |p: f64| (r.powf(p), p * r.powf(p - 1.0), p * (p - 1.0) * r.powf(p - 2.0));
        match self.case {
            GrowthCase::Above => pw(q),
            GrowthCase::Critical => {
                let (a, a1, a2) = pw(q);
                let l = r.ln();
                (-a * l, -(a1 * l + a / r), -(a2 * l + 2.0 * a1 / r - a / (r * r)))
            }
            GrowthCase::Below => {
                let mu = (self.kk() * self.kk() + self.lambda1).sqrt();
                let (a, a1, a2) = pw(mu - self.kk());
                let (b, b1, b2) = pw(q);
                (a - b, a1 - b1, a2 - b2)
            }
        }
    }

    fn phi_jet(&self, t: f64) -> Result<(f64, f64, f64, f64)> {
        let h = self.profile.h();
        let (f, f1, _) = interp_uniform(self.phi1, h, t, true);
        let (rho, _, _) = self.profile.interp(t)?;
        let n = self.profile.n as f64;
        let kappa = n * (n + 2.0) / 4.0;
        let src = (kappa / (rho * rho) - self.lambda1) * f;
        if t < 1e-8 {
            let f2 = src / (n - 1.0);
            Ok((f, 0.0, f2, f2))
        } else {
            let cf = t.cos() / t.sin() * f1;
            Ok((f, f1, src - (n - 2.0) * cf, cf))
        }
    }

    /// Jet of `w` in `(r, θ)`.
    pub fn jet(&self, r: f64, t: f64) -> Result<ConeJet> {
        let uv = self.profile.cone_jet(r, t)?;
        let h = self.profile.h();
        let (c, c1, c2) = interp_uniform(self.c1, h, t, true);
        let cc = if t < 1e-8 { c2 } else { t.cos() / t.sin() * c1 };
        let first = ConeJet::separable((r, 1.0, 0.0), (c, c1, c2, cc)).mul(&uv);
        let quad = ConeJet::separable((r * r, 2.0 * r, 2.0), (1.0, 0.0, 0.0, 0.0)).mul(&uv).scale(self.a0);
        let eig = ConeJet::separable(self.radial(r), self.phi_jet(t)?).scale(self.a1);
        let sign = if self.upper { 1.0 } else { -1.0 };
        Ok(uv.add(&first).add(&quad.add(&eig).scale(sign)))
    }

    /// `(ℒw − (n(n−2)/4)w^{(n+2)/(n−2)}, scale)` at `(r, θ)` in the meridian
    /// `φ = 0`; the scale is `(n(n−2)/4)u_V^{(n+2)/(n−2)}·r`.
    pub fn residual(&self, r: f64, t: f64) -> Result<(f64, f64)> {
        let n = self.profile.n;
        let nf = n as f64;
        let mut y = vec![0.0; n];
        y[0] = r * t.sin();
        y[n - 1] = r * t.cos();
        let jet = self.jet(r, t)?;
        let (w, g, hm) = cap_cartesian(&y, &jet);
        let (a, b) = self.map.pullback_coefficients(&y)?;
        let lw = a.component_mul(&hm).sum() + b.dot(&g);
        let p = (nf + 2.0) / (nf - 2.0);
        let coef = nf * (nf - 2.0) / 4.0;
        let uv = self.profile.cone_jet(r, t)?.u;
        let scale = coef * uv.powf(p) * r;
        if !(w > 0.0) {
            return Ok((if self.upper { f64::INFINITY } else { f64::NEG_INFINITY }, scale));
        }
        Ok((lw - coef * w.powf(p), scale))
    }
}

pub const SUPERSOLUTION_SLACK: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct SupersolutionReport {
    pub case: GrowthCase,
    pub upper: bool,
    pub a0: f64,
    pub a1: f64,
    /// Largest `±residual/scale` on the accepted annuli (positive means violation).
    pub max_violation: f64,
    /// Largest radius `r̄₁` with every sample of `[r̄₁/100, r̄₁]` certified.
    pub r_bar: Option<f64>,
    pub samples: usize,
}

fn sample_thetas(profile: &RadialProfile, count: usize) -> Vec<f64> {
    let big_n = profile.len() - 1;
    let last = big_n - 2;
    let stride = (last / count).max(1);
    (0..=last).step_by(stride).map(|i| profile.theta[i]).collect()
}

fn worst_on_annulus(s: &Supersolution, r_hi: f64, thetas: &[f64]) -> Result<(f64, usize)> {
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0;
    for q in 0..10 {
        let r = r_hi * 10f64.powf(-2.0 * q as f64 / 9.0);
        for &t in thetas {
            let (res, scale) = s.residual(r, t)?;
            let v = if s.upper { res / scale } else { -res / scale };
            worst = worst.max(v);
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Certifies the barrier inequality on annuli `[r̄/100, r̄]`, bisecting for the
/// largest admissible `r̄ ≤ r_max`.
pub fn supersolution_build(s: &Supersolution, r_max: f64) -> Result<SupersolutionReport> {
    if s.c1.len() != s.profile.len() || s.phi1.len() != s.profile.len() {
        return Err(Error::invalid("fields do not share the profile grid"));
    }
    if !matches!(s.map.kind, MapKind::Identity | MapKind::Ball { .. } | MapKind::Example1 { .. }) {
        return Err(Error::invalid("the barrier is built for axisymmetric maps"));
    }
    if !(r_max > 0.0 && r_max <= 0.5 * s.map.validity_radius) {
        return Err(Error::invalid(format!("radius {r_max} outside the map's validity region")));
    }
    let thetas = sample_thetas(s.profile, 40);
    let ok = |r: f64| -> Result<(bool, f64, usize)> {
        let (w, c) = worst_on_annulus(s, r, &thetas)?;
        Ok((w <= SUPERSOLUTION_SLACK, w, c))
    };
    let (good, w, c) = ok(r_max)?;
    let mut report = SupersolutionReport {
        case: s.case,
        upper: s.upper,
        a0: s.a0,
        a1: s.a1,
        max_violation: w,
        r_bar: None,
        samples: c,
    };
    if good {
        report.r_bar = Some(r_max);
        return Ok(report);
    }
    let r_min = r_max * 1e-4;
    let (good_lo, w_lo, _) = ok(r_min)?;
    if !good_lo {
        report.max_violation = w_lo;
        return Ok(report);
    }
    let (mut lo, mut hi) = (r_min.ln(), r_max.ln());
    let mut best = w_lo;
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        let (g, w, _) = ok(mid.exp())?;
        if g {
            lo = mid;
            best = w;
        } else {
            hi = mid;
        }
    }
    report.r_bar = Some(lo.exp());
    report.max_violation = best;
    Ok(report)
}

/// The constant `k` of the proof's recipe `A₁ = kA₀`:
/// `k > ((n/2)C_δ^{(n+2)/(n−2)} + 4C_δ)/(γ c_δ)`, where `C_δ`, `c_δ` bound `ξ`
/// and `φ₁` away from the layer `{ξ^{4/(n−2)} > 16/n}` and `γ` is the case's
/// coefficient of `φ₁`.
pub fn recipe_k(profile: &RadialProfile, phi1: &[f64], lambda1: f64, case: GrowthCase) -> Result<f64> {
    let n = profile.n as f64;
    let gamma = match case {
        GrowthCase::Above => lambda1 - (3.0 - n / 2.0) * (n / 2.0 + 1.0),
        GrowthCase::Critical => 4.0,
        GrowthCase::Below => (3.0 - n / 2.0) * (n / 2.0 + 1.0) - lambda1,
    };
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("{case:?} does not match λ₁ = {lambda1}")));
    }
    let cut = n.sqrt() / 4.0;
    let k = (n - 2.0) / 2.0;
    let mut big = 0.0f64;
    let mut small = f64::INFINITY;
    for (r, p) in profile.rho.iter().zip(phi1) {
        if *r >= cut {
            big = big.max(r.powf(-k));
            small = small.min(*p);
        }
    }
    if !(small > 0.0) {
        return Err(Error::domain("φ₁ is not positive away from the boundary layer"));
    }
    Ok(1.01 * (n / 2.0 * big.powf((n + 2.0) / (n - 2.0)) + 4.0 * big) / (gamma * small))
}
