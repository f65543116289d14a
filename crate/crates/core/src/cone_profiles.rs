//! Angular profiles of the exact cone solutions `u_V = |x|^{-(n-2)/2} ξ(θ)`.
//!
//! Both the wedge and the rotationally symmetric cap are solved for
//! `ρ = ξ^{-2/(n-2)}`, which vanishes linearly at the boundary of `Σ`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::linalg::{Csr, Triplets};
use crate::newton::{newton, NewtonOptions, NonlinearSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Vanishing,
    RegularCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    /// Cross-section of a wedge `V_α × R ⊂ R³`; `θ` is the planar angle.
    Wedge,
    /// Rotationally symmetric cap `{Θ < α} ⊂ S^{n-1}`; `θ` is the polar angle.
    Cap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadialProfile {
    pub n: usize,
    pub kind: ProfileKind,
    pub alpha: f64,
    pub theta: Vec<f64>,
    pub rho: Vec<f64>,
    pub left: EndpointKind,
    pub right: EndpointKind,
    /// Relative back-substitution residual of the original `ξ` (or `η`) equation.
    pub residual: f64,
    /// Sup distance between the two Richardson extrapolants, when extrapolated.
    pub richardson_gap: Option<f64>,
    pub newton_iterations: usize,
}

/// Jet of `u_V` in cone coordinates `(r, θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeJet {
    pub u: f64,
    pub u_r: f64,
    pub u_t: f64,
    pub u_rr: f64,
    pub u_rt: f64,
    pub u_tt: f64,
    /// `cot θ · u_θ`, with its limit at a regular center.
    pub cot_u_t: f64,
}

impl ConeJet {
    /// Jet of `R(r)·f(θ)` from `(R, R', R'')` and `(f, f', f'', cot θ·f')`.
    pub fn separable(radial: (f64, f64, f64), angular: (f64, f64, f64, f64)) -> Self {
        let (a, a1, a2) = radial;
        let (f, f1, f2, cf) = angular;
        ConeJet {
            u: a * f,
            u_r: a1 * f,
            u_t: a * f1,
            u_rr: a2 * f,
            u_rt: a1 * f1,
            u_tt: a * f2,
            cot_u_t: a * cf,
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        ConeJet {
            u: c * self.u,
            u_r: c * self.u_r,
            u_t: c * self.u_t,
            u_rr: c * self.u_rr,
            u_rt: c * self.u_rt,
            u_tt: c * self.u_tt,
            cot_u_t: c * self.cot_u_t,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        ConeJet {
            u: self.u + o.u,
            u_r: self.u_r + o.u_r,
            u_t: self.u_t + o.u_t,
            u_rr: self.u_rr + o.u_rr,
            u_rt: self.u_rt + o.u_rt,
            u_tt: self.u_tt + o.u_tt,
            cot_u_t: self.cot_u_t + o.cot_u_t,
        }
    }

    pub fn mul(&self, o: &Self) -> Self {
        ConeJet {
            u: self.u * o.u,
            u_r: self.u_r * o.u + self.u * o.u_r,
            u_t: self.u_t * o.u + self.u * o.u_t,
            u_rr: self.u_rr * o.u + 2.0 * self.u_r * o.u_r + self.u * o.u_rr,
            u_rt: self.u_rt * o.u + self.u_r * o.u_t + self.u_t * o.u_r + self.u * o.u_rt,
            u_tt: self.u_tt * o.u + 2.0 * self.u_t * o.u_t + self.u * o.u_tt,
            cot_u_t: self.cot_u_t * o.u + self.u * o.cot_u_t,
        }
    }
}

/// `(|y|, Θ)` with `Θ` the angle from `e_n`.
pub fn cap_polar(y: &[f64]) -> (f64, f64) {
    let n = y.len();
    let r = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    (r, (y[n - 1] / r).clamp(-1.0, 1.0).acos())
}

/// Value, Cartesian gradient and Hessian at `y ∈ R^n` of a function that is
/// rotationally symmetric about `e_n`, given its jet in `(r, Θ)`.
pub fn cap_cartesian(y: &[f64], jet: &ConeJet) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = y.len();
    let (r, t) = cap_polar(y);
    let er = DVector::from_iterator(n, y.iter().map(|v| v / r));
    let rp = y[..n - 1].iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut eh = DVector::zeros(n);
    if rp > 1e-300 {
        for i in 0..n - 1 {
            eh[i] = y[i] / rp;
        }
    } else {
        eh[0] = 1.0;
    }
    let mut en = DVector::zeros(n);
    en[n - 1] = 1.0;
    let et = &eh * t.cos() - &en * t.sin();
    let grad = &er * jet.u_r + &et * (jet.u_t / r);
    let hrr = jet.u_rr;
    let hrt = jet.u_rt / r - jet.u_t / (r * r);
    let htt = jet.u_tt / (r * r) + jet.u_r / r;
    let hpp = jet.u_r / r + jet.cot_u_t / (r * r);
    let err = &er * er.transpose();
    let ett = &et * et.transpose();
    let ert = &er * et.transpose();
    let id = DMatrix::<f64>::identity(n, n);
    let hess = &err * hrr + (&ert + ert.transpose()) * hrt + &ett * htt + (id - &err - &ett) * hpp;
    (jet.u, grad, hess)
}

impl RadialProfile {
    fn k(&self) -> f64 {
        (self.n as f64 - 2.0) / 2.0
    }

    pub fn h(&self) -> f64 {
        self.theta[1] - self.theta[0]
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// `ξ = ρ^{-(n-2)/2}` (`η = ρ^{-1/2}` for wedges); infinite at vanishing endpoints.
    pub fn xi(&self) -> Vec<f64> {
        let k = self.k();
        self.rho.iter().map(|r| r.powf(-k)).collect()
    }

    /// Geodesic distance from `θ` to the boundary of the section.
    pub fn boundary_distance(&self, t: f64) -> f64 {
        match self.kind {
            ProfileKind::Wedge => t.min(self.alpha - t),
            ProfileKind::Cap => self.alpha - t,
        }
    }

    pub fn interior_range(&self) -> std::ops::Range<usize> {
        let lo = if self.left == EndpointKind::Vanishing { 1 } else { 0 };
        lo..self.len() - 1
    }

    /// `(c₃, c₄)` with `c₃ ≤ ρ/d_Σ ≤ c₄` at interior nodes.
    pub fn rho_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in self.interior_range() {
            let q = self.rho[i] / self.boundary_distance(self.theta[i]);
            lo = lo.min(q);
            hi = hi.max(q);
        }
        (lo, hi)
    }

    /// One-sided second-order `|ρ'|` at each vanishing endpoint.
    pub fn endpoint_slopes(&self) -> Vec<f64> {
        let h = self.h();
        let r = &self.rho;
        let m = r.len() - 1;
        let mut out = Vec::new();
        if self.left == EndpointKind::Vanishing {
            out.push(((-3.0 * r[0] + 4.0 * r[1] - r[2]) / (2.0 * h)).abs());
        }
        out.push(((3.0 * r[m] - 4.0 * r[m - 1] + r[m - 2]) / (2.0 * h)).abs());
        out
    }

    /// Local cubic interpolation of `(ρ, ρ', ρ'')` at `t`.
    pub fn interp(&self, t: f64) -> Result<(f64, f64, f64)> {
        if !(t >= 0.0 && t <= self.alpha) {
            return Err(Error::domain(format!(
                "θ = {t} outside the profile support [0, {}]",
                self.alpha
            )));
        }
        Ok(interp_uniform(&self.rho, self.h(), t, self.left == EndpointKind::RegularCenter))
    }

    /// Interpolated `(ρ, ρ')` with `ρ''` taken from the profile equation, so
    /// that the resulting jet of `u_V` solves the PDE exactly at the point.
    pub fn interp_ode(&self, t: f64) -> Result<(f64, f64, f64)> {
        let (rho, d1, _) = self.interp(t)?;
        if !(rho > 0.0) {
            return Err(Error::domain(format!("θ = {t} is not strictly interior")));
        }
        let d2 = match self.kind {
            ProfileKind::Wedge => (1.5 * d1 * d1 + 0.5 * rho * rho - 1.5) / rho,
            ProfileKind::Cap => {
                let nf = self.n as f64;
                let rhs = (0.5 * nf * d1 * d1 - 0.5 * (nf - 2.0) * rho * rho - 0.5 * nf) / rho;
                if t < 1e-8 {
                    rhs / (nf - 1.0)
                } else {
                    rhs - (nf - 2.0) * t.cos() / t.sin() * d1
                }
            }
        };
        Ok((rho, d1, d2))
    }

    /// `u_V` and its first and second derivatives in `(r, θ)`.
    pub fn cone_jet(&self, r: f64, t: f64) -> Result<ConeJet> {
        if !(r > 0.0) {
            return Err(Error::domain(format!("radius {r} must be positive")));
        }
        let (rho, d1, d2) = self.interp_ode(t)?;
        let k = self.k();
        let xi = rho.powf(-k);
        let xi1 = -k * rho.powf(-k - 1.0) * d1;
        let xi2 = -k * rho.powf(-k - 1.0) * d2 + k * (k + 1.0) * rho.powf(-k - 2.0) * d1 * d1;
        let cot_xi1 = if self.kind == ProfileKind::Cap && t < 1e-8 {
            xi2
        } else {
            t.cos() / t.sin() * xi1
        };
        let rk = r.powf(-k);
        Ok(ConeJet {
            u: rk * xi,
            u_r: -k * rk / r * xi,
            u_t: rk * xi1,
            u_rr: k * (k + 1.0) * rk / (r * r) * xi,
            u_rt: -k * rk / r * xi1,
            u_tt: rk * xi2,
            cot_u_t: rk * cot_xi1,
        })
    }

    /// `u_V(r, θ) = r^{-(n-2)/2} ξ(θ)`.
    pub fn eval_cone_solution(&self, r: f64, t: f64) -> Result<f64> {
        if !(t > 0.0 || self.left == EndpointKind::RegularCenter) || !(t < self.alpha) {
            return Err(Error::domain(format!("θ = {t} is not strictly interior")));
        }
        Ok(self.cone_jet(r, t)?.u)
    }

    /// Value, Cartesian gradient and Hessian of `u_V` at `y`.
    ///
    /// Caps use `y ∈ R^n` with axis `e_n`; wedges use `y ∈ R³` with faces in
    /// the `(y₁, y₂)` plane at angles `0` and `α`.
    pub fn cartesian_jet(&self, y: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        match self.kind {
            ProfileKind::Cap => {
                if y.len() != self.n {
                    return Err(Error::invalid("point dimension does not match profile"));
                }
                let (r, t) = cap_polar(y);
                let jet = self.cone_jet(r, t)?;
                Ok(cap_cartesian(y, &jet))
            }
            ProfileKind::Wedge => {
                if y.len() != 3 {
                    return Err(Error::invalid("wedge points live in R³"));
                }
                let r = y[0].hypot(y[1]);
                let t = y[1].atan2(y[0]);
                let jet = self.cone_jet(r, t)?;
                let er = DVector::from_vec(vec![t.cos(), t.sin(), 0.0]);
                let et = DVector::from_vec(vec![-t.sin(), t.cos(), 0.0]);
                let grad = &er * jet.u_r + &et * (jet.u_t / r);
                let hrr = jet.u_rr;
                let hrt = jet.u_rt / r - jet.u_t / (r * r);
                let htt = jet.u_tt / (r * r) + jet.u_r / r;
                let ert = &er * et.transpose();
                let hess = &er * er.transpose() * hrr
                    + (&ert + ert.transpose()) * hrt
                    + &et * et.transpose() * htt;
                Ok((jet.u, grad, hess))
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let xi = self.xi();
        let mut s = String::from("theta,rho,xi\n");
        for i in 0..self.len() {
            s.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", self.theta[i], self.rho[i], xi[i]));
        }
        s
    }

    pub fn metadata(&self) -> serde_json::Value {
        let (c3, c4) = self.rho_bounds();
        serde_json::json!({
            "n": self.n,
            "kind": self.kind,
            "alpha": self.alpha,
            "N": self.len() - 1,
            "residual": self.residual,
            "richardson_gap": self.richardson_gap,
            "c3": c3,
            "c4": c4,
            "endpoint_slopes": self.endpoint_slopes(),
        })
    }
}

/// Weights giving the value, first and second derivative at `x` of the cubic
/// through four nodes.
pub(crate) fn lagrange4(xs: &[f64; 4], x: f64) -> ([f64; 4], [f64; 4], [f64; 4]) {
    let mut w0 = [0.0; 4];
    let mut w1 = [0.0; 4];
    let mut w2 = [0.0; 4];
    for j in 0..4 {
        let others: Vec<usize> = (0..4).filter(|&m| m != j).collect();
        let den: f64 = others.iter().map(|&m| xs[j] - xs[m]).product();
        let d: Vec<f64> = others.iter().map(|&m| x - xs[m]).collect();
        w0[j] = d[0] * d[1] * d[2] / den;
        w1[j] = (d[1] * d[2] + d[0] * d[2] + d[0] * d[1]) / den;
        w2[j] = 2.0 * (d[0] + d[1] + d[2]) / den;
    }
    (w0, w1, w2)
}

/// Value, first and second derivative at `t` of the local cubic through
/// samples `values[i]` at `θ_i = i·h`. With `even`, samples are reflected
/// evenly through `θ = 0`.
pub fn interp_uniform(values: &[f64], h: f64, t: f64, even: bool) -> (f64, f64, f64) {
    let m = values.len() - 1;
    let i = ((t / h).floor() as isize).clamp(0, m as isize - 1);
    let mut start = i - 1;
    if !even && start < 0 {
        start = 0;
    }
    if start + 3 > m as isize {
        start = m as isize - 3;
    }
    let mut xs = [0.0; 4];
    let mut ys = [0.0; 4];
    for q in 0..4 {
        let j = start + q as isize;
        xs[q] = j as f64 * h;
        ys[q] = values[j.unsigned_abs()];
    }
    let (w0, w1, w2) = lagrange4(&xs, t);
    let dot = |w: [f64; 4]| w.iter().zip(&ys).map(|(a, b)| a * b).sum::<f64>();
    (dot(w0), dot(w1), dot(w2))
}

/// `∫_a^b sin^m t dt` by the reduction formula.
pub(crate) fn sin_power_integral(m: usize, a: f64, b: f64) -> f64 {
    match m {
        0 => b - a,
        1 => a.cos() - b.cos(),
        _ => {
            let mf = m as f64;
            let boundary = (a.sin().powi(m as i32 - 1) * a.cos() - b.sin().powi(m as i32 - 1) * b.cos()) / mf;
            boundary + (mf - 1.0) / mf * sin_power_integral(m - 2, a, b)
        }
    }
}

/// Conservative discretization of `Δ_θ = sin^{-(n-2)} ∂(sin^{n-2} ∂)` on a
/// cap grid with a regular center at node 0.
#[derive(Debug, Clone)]
pub struct CapLaplacian {
    pub n: usize,
    pub h: f64,
    /// Cell volumes (per unit solid angle of the other directions).
    pub volume: Vec<f64>,
    /// Face weights `sin^{n-2}(θ_{i+1/2})`.
    pub face: Vec<f64>,
}

impl CapLaplacian {
    pub fn new(n: usize, alpha: f64, big_n: usize) -> Self {
        let h = alpha / big_n as f64;
        let m = n - 2;
        let face: Vec<f64> = (0..big_n)
            .map(|i| ((i as f64 + 0.5) * h).sin().powi(m as i32))
            .collect();
        let mut volume = vec![0.0; big_n + 1];
        volume[0] = face[0] * h / (2.0 * (n as f64 - 1.0));
        for (i, v) in volume.iter_mut().enumerate().skip(1) {
            let t = i as f64 * h;
            *v = sin_power_integral(m, t - 0.5 * h, t + 0.5 * h);
        }
        Self { n, h, volume, face }
    }

    /// Coefficients `(lower, diag, upper)` of row `i` (`lower` unused at the center).
    pub fn row(&self, i: usize) -> (f64, f64, f64) {
        let h = self.h;
        let v = self.volume[i] * h;
        if i == 0 {
            let c = self.face[0] / v;
            (0.0, -c, c)
        } else {
            let lo = self.face[i - 1] / v;
            let up = self.face[i] / v;
            (lo, -(lo + up), up)
        }
    }

    pub fn apply(&self, u: &[f64], i: usize) -> f64 {
        let (lo, d, up) = self.row(i);
        let left = if i == 0 { 0.0 } else { lo * u[i - 1] };
        left + d * u[i] + up * u[i + 1]
    }
}

struct WedgeSystem {
    h: f64,
    n_int: usize,
}

impl WedgeSystem {
    fn full(&self, x: &[f64]) -> Vec<f64> {
        let mut r = Vec::with_capacity(self.n_int + 2);
        r.push(0.0);
        r.extend_from_slice(x);
        r.push(0.0);
        r
    }
}

impl NonlinearSystem for WedgeSystem {
    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let r = self.full(x);
        let h = self.h;
        (1..=self.n_int)
            .map(|i| {
                let d2 = (r[i + 1] - 2.0 * r[i] + r[i - 1]) / (h * h);
                let d1 = (r[i + 1] - r[i - 1]) / (2.0 * h);
                r[i] * d2 - 1.5 * d1 * d1 - 0.5 * r[i] * r[i] + 1.5
            })
            .collect()
    }

    fn jacobian(&self, x: &[f64]) -> Csr {
        let r = self.full(x);
        let h = self.h;
        let m = self.n_int;
        let mut t = Triplets::with_capacity(m, m, 3 * m);
        for i in 1..=m {
            let row = i - 1;
            let d2 = (r[i + 1] - 2.0 * r[i] + r[i - 1]) / (h * h);
            let d1 = (r[i + 1] - r[i - 1]) / (2.0 * h);
            t.push(row, row, d2 - 2.0 * r[i] / (h * h) - r[i]);
            let off = r[i] / (h * h);
            let g = 1.5 * 2.0 * d1 / (2.0 * h);
            if i > 1 {
                t.push(row, row - 1, off + g);
            }
            if i < m {
                t.push(row, row + 1, off - g);
            }
        }
        t.to_csr()
    }
}

struct CapSystem {
    n: usize,
    lap: CapLaplacian,
    m: usize,
}

impl CapSystem {
    fn full(&self, x: &[f64]) -> Vec<f64> {
        let mut r = x.to_vec();
        r.push(0.0);
        r
    }
}

impl NonlinearSystem for CapSystem {
    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let r = self.full(x);
        let nf = self.n as f64;
        let h = self.lap.h;
        (0..self.m)
            .map(|i| {
                let d1 = if i == 0 { 0.0 } else { (r[i + 1] - r[i - 1]) / (2.0 * h) };
                r[i] * self.lap.apply(&r, i) - 0.5 * nf * d1 * d1 + 0.5 * (nf - 2.0) * r[i] * r[i] + 0.5 * nf
            })
            .collect()
    }

    fn jacobian(&self, x: &[f64]) -> Csr {
        let r = self.full(x);
        let nf = self.n as f64;
        let h = self.lap.h;
        let m = self.m;
        let mut t = Triplets::with_capacity(m, m, 3 * m);
        for i in 0..m {
            let (lo, d, up) = self.lap.row(i);
            let lap = self.lap.apply(&r, i);
            t.push(i, i, lap + r[i] * d + (nf - 2.0) * r[i]);
            let g = if i == 0 { 0.0 } else { nf * (r[i + 1] - r[i - 1]) / (2.0 * h) / (2.0 * h) };
            if i > 0 {
                t.push(i, i - 1, r[i] * lo + g);
            }
            if i + 1 < m {
                t.push(i, i + 1, r[i] * up - g);
            }
        }
        t.to_csr()
    }
}

fn check_grid(alpha: f64, big_n: usize, min_n: usize, max_alpha_inclusive: bool) -> Result<()> {
    let below = if max_alpha_inclusive { alpha <= PI } else { alpha < PI };
    if !(alpha > 0.0 && below) {
        return Err(Error::invalid(format!("α = {alpha} outside (0, π)")));
    }
    if big_n < min_n {
        return Err(Error::invalid(format!("grid size {big_n} below {min_n}")));
    }
    Ok(())
}

fn newton_opts() -> NewtonOptions {
    NewtonOptions {
        tol: 1e-11,
        max_iter: 200,
        floor: Some(1e-14),
        step_tol: 1e-13,
    }
}

/// Second-order finite-difference wedge profile without extrapolation.
pub fn wedge_fd(alpha: f64, big_n: usize) -> Result<RadialProfile> {
    check_grid(alpha, big_n, 8, true)?;
    let h = alpha / big_n as f64;
    let sys = WedgeSystem { h, n_int: big_n - 1 };
    let theta: Vec<f64> = (0..=big_n).map(|i| i as f64 * h).collect();
    let x0: Vec<f64> = theta[1..big_n].iter().map(|t| t * (alpha - t) / alpha).collect();
    let rep = newton(&sys, x0, newton_opts(), "wedge profile")?;
    let rho = sys.full(&rep.x);
    let res = sys.residual(&rep.x);
    let residual = res.iter().fold(0.0f64, |m, v| m.max(v.abs())) / 1.5;
    Ok(RadialProfile {
        n: 3,
        kind: ProfileKind::Wedge,
        alpha,
        theta,
        rho,
        left: EndpointKind::Vanishing,
        right: EndpointKind::Vanishing,
        residual,
        richardson_gap: None,
        newton_iterations: rep.iterations,
    })
}

/// Second-order conservative finite-volume cap profile without extrapolation.
pub fn cap_fd(n: usize, alpha: f64, big_n: usize) -> Result<RadialProfile> {
    if n < 3 {
        return Err(Error::invalid("cap profiles need n >= 3"));
    }
    check_grid(alpha, big_n, 8, false)?;
    let lap = CapLaplacian::new(n, alpha, big_n);
    let h = lap.h;
    let sys = CapSystem { n, lap, m: big_n };
    let theta: Vec<f64> = (0..=big_n).map(|i| i as f64 * h).collect();
    let x0: Vec<f64> = theta[..big_n]
        .iter()
        .map(|t| (alpha * alpha - t * t) / (2.0 * alpha))
        .collect();
    let rep = newton(&sys, x0, newton_opts(), "cap profile")?;
    let rho = sys.full(&rep.x);
    let res = sys.residual(&rep.x);
    let residual = res.iter().fold(0.0f64, |m, v| m.max(v.abs())) / (0.5 * n as f64);
    Ok(RadialProfile {
        n,
        kind: ProfileKind::Cap,
        alpha,
        theta,
        rho,
        left: EndpointKind::RegularCenter,
        right: EndpointKind::Vanishing,
        residual,
        richardson_gap: None,
        newton_iterations: rep.iterations,
    })
}

/// Richardson agreement required between the two extrapolants.
pub const RICHARDSON_TOL: f64 = 1e-7;

fn richardson<F>(big_n: usize, solve: F) -> Result<RadialProfile>
where
    F: Fn(usize) -> Result<RadialProfile>,
{
    let p1 = solve(big_n)?;
    let p2 = solve(2 * big_n)?;
    let p4 = solve(4 * big_n)?;
    let mut out = p1.clone();
    let mut gap = 0.0f64;
    for i in 0..=big_n {
        let r1 = (4.0 * p2.rho[2 * i] - p1.rho[i]) / 3.0;
        let r2 = (4.0 * p4.rho[4 * i] - p2.rho[2 * i]) / 3.0;
        gap = gap.max((r1 - r2).abs());
        out.rho[i] = r2;
    }
    out.residual = p4.residual;
    out.newton_iterations = p4.newton_iterations;
    out.richardson_gap = Some(gap);
    if gap >= RICHARDSON_TOL {
        return Err(Error::Certification(format!(
            "Richardson extrapolants differ by {gap:.3e}"
        )));
    }
    Ok(out)
}

/// Wedge profile `ρ = η^{-2}` solving `ρρ'' = (3/2)ρ'² + ρ²/2 − 3/2`, `ρ(0) = ρ(α) = 0`,
/// extrapolated from grids `N`, `2N`, `4N`.
pub fn solve_wedge(alpha: f64, big_n: usize) -> Result<RadialProfile> {
    check_grid(alpha, big_n, 64, true)?;
    richardson(big_n, |m| wedge_fd(alpha, m)).stage("solve_wedge")
}

/// Cap profile `ρ = ξ^{-2/(n-2)}` solving
/// `ρΔ_θρ = (n/2)ρ'² − ((n−2)/2)ρ² − n/2`, `ρ'(0) = 0`, `ρ(α) = 0`,
/// extrapolated from grids `N`, `2N`, `4N`.
pub fn solve_cap(n: usize, alpha: f64, big_n: usize) -> Result<RadialProfile> {
    check_grid(alpha, big_n, 64, false)?;
    richardson(big_n, |m| cap_fd(n, alpha, m)).stage("solve_cap")
}

/// Residual of the `η` equation `η'' + η/4 − (3/4)η⁵` for `η = ρ^{-1/2}`,
/// given `ρ, ρ', ρ''` at a point.
pub fn eta_residual(rho: f64, d1: f64, d2: f64) -> f64 {
    let eta2 = 0.75 * rho.powf(-2.5) * d1 * d1 - 0.5 * rho.powf(-1.5) * d2;
    let eta = rho.powf(-0.5);
    eta2 + 0.25 * eta - 0.75 * eta.powi(5)
}

/// Residual of `ρρ'' − (3/2)ρ'² − ρ²/2 + 3/2`.
pub fn wedge_rho_residual(rho: f64, d1: f64, d2: f64) -> f64 {
    rho * d2 - 1.5 * d1 * d1 - 0.5 * rho * rho + 1.5
}

/// Residual of `Δ_θξ − ((n−2)²/4)ξ − (n(n−2)/4)ξ^{(n+2)/(n−2)}` for `ξ = ρ^{-(n-2)/2}`,
/// given `ρ`, `ρ'`, and `Δ_θρ` at a point.
pub fn xi_residual(n: usize, rho: f64, d1: f64, lap: f64) -> f64 {
    let k = (n as f64 - 2.0) / 2.0;
    let lap_xi = -k * rho.powf(-k - 1.0) * lap + k * (k + 1.0) * rho.powf(-k - 2.0) * d1 * d1;
    let xi = rho.powf(-k);
    lap_xi - k * k * xi - k * (k + 1.0) * rho.powf(-k - 2.0)
}

/// Residual of `ρΔρ − (n/2)ρ'² + ((n−2)/2)ρ² + n/2`.
pub fn cap_rho_residual(n: usize, rho: f64, d1: f64, lap: f64) -> f64 {
    let nf = n as f64;
    rho * lap - 0.5 * nf * d1 * d1 + 0.5 * (nf - 2.0) * rho * rho + 0.5 * nf
}

/// `u_V` of a wedge at the point whose distances to the faces `θ = α` and
/// `θ = 0` are `d₁` and `d₂`.
pub fn f_v(profile: &RadialProfile, d1: f64, d2: f64) -> Result<f64> {
    if profile.kind != ProfileKind::Wedge {
        return Err(Error::invalid("f_V needs a wedge profile"));
    }
    if !(d1 > 0.0 && d2 > 0.0 && d1.is_finite() && d2.is_finite()) {
        return Err(Error::domain(format!(
            "distance pair ({d1}, {d2}) is not realizable"
        )));
    }
    let (t, r) = wedge_point_from_distances(profile.alpha, d1, d2);
    profile.eval_cone_solution(r, t)
}

/// Solves `r sin θ = d₂`, `r sin(α − θ) = d₁` by bisection on the strictly
/// decreasing quotient `sin(α − θ)/sin θ`.
pub fn wedge_point_from_distances(alpha: f64, d1: f64, d2: f64) -> (f64, f64) {
    let target = d1 / d2;
    let g = |t: f64| (alpha - t).sin() / t.sin() - target;
    let (mut lo, mut hi) = (0.0, alpha);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    (t, d2 / t.sin())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Chebyshev–Lobatto collocation for the ρ-equations, used as an oracle.
    fn collocation(kind: ProfileKind, n: usize, alpha: f64, m: usize) -> (Vec<f64>, Vec<f64>) {
        // nodes on [0, α]
        let x: Vec<f64> = (0..=m).map(|j| (PI * j as f64 / m as f64).cos()).collect();
        let mut d = DMatrix::<f64>::zeros(m + 1, m + 1);
        let c = |j: usize| if j == 0 || j == m { 2.0 } else { 1.0 };
        for i in 0..=m {
            for j in 0..=m {
                if i != j {
                    let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                    d[(i, j)] = c(i) / c(j) * s / (x[i] - x[j]);
                }
            }
            let row: f64 = (0..=m).filter(|&j| j != i).map(|j| d[(i, j)]).sum();
            d[(i, i)] = -row;
        }
        // map [-1, 1] → [0, α], θ = α(1 − x)/2
        let th: Vec<f64> = x.iter().map(|v| alpha * (1.0 - v) / 2.0).collect();
        let d1 = &d * (-2.0 / alpha);
        let d2 = &d1 * &d1;
        let nf = n as f64;
        let mut rho = DVector::from_iterator(
            m + 1,
            th.iter().map(|t| match kind {
                ProfileKind::Wedge => t * (alpha - t) / alpha,
                ProfileKind::Cap => (alpha * alpha - t * t) / (2.0 * alpha),
            }),
        );
        for _ in 0..100 {
            let r1 = &d1 * &rho;
            let r2 = &d2 * &rho;
            let mut f = DVector::zeros(m + 1);
            let mut jac = DMatrix::zeros(m + 1, m + 1);
            for i in 0..=m {
                let bc = match kind {
                    ProfileKind::Wedge => i == 0 || i == m,
                    ProfileKind::Cap => th[i] > alpha - 1e-14,
                };
                if bc {
                    f[i] = rho[i];
                    jac[(i, i)] = 1.0;
                    continue;
                }
                match kind {
                    ProfileKind::Wedge => {
                        f[i] = wedge_rho_residual(rho[i], r1[i], r2[i]);
                        for j in 0..=m {
                            jac[(i, j)] = rho[i] * d2[(i, j)] - 3.0 * r1[i] * d1[(i, j)];
                        }
                        jac[(i, i)] += r2[i] - rho[i];
                    }
                    ProfileKind::Cap => {
                        let center = th[i] < 1e-14;
                        let (lap, dl): (f64, Vec<f64>) = if center {
                            ((nf - 1.0) * r2[i], (0..=m).map(|j| (nf - 1.0) * d2[(i, j)]).collect())
                        } else {
                            let ct = th[i].cos() / th[i].sin();
                            (
                                r2[i] + (nf - 2.0) * ct * r1[i],
                                (0..=m).map(|j| d2[(i, j)] + (nf - 2.0) * ct * d1[(i, j)]).collect(),
                            )
                        };
                        let g = if center { 0.0 } else { r1[i] };
                        f[i] = cap_rho_residual(n, rho[i], g, lap);
                        for j in 0..=m {
                            jac[(i, j)] = rho[i] * dl[j] - if center { 0.0 } else { nf * g * d1[(i, j)] };
                        }
                        jac[(i, i)] += lap + (nf - 2.0) * rho[i];
                    }
                }
            }
            let dx = jac.lu().solve(&(-&f)).unwrap();
            rho += &dx;
            if dx.amax() < 1e-14 {
                break;
            }
        }
        (th, rho.as_slice().to_vec())
    }

    /// Barycentric evaluation of the collocation polynomial.
    fn cheb_eval(th: &[f64], v: &[f64], t: f64) -> f64 {
        let m = th.len() - 1;
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..=m {
            if (t - th[j]).abs() < 1e-15 {
                return v[j];
            }
            let mut w = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == m {
                w *= 0.5;
            }
            let q = w / (t - th[j]);
            num += q * v[j];
            den += q;
        }
        num / den
    }

    fn sup_vs_oracle(p: &RadialProfile, th: &[f64], v: &[f64]) -> f64 {
        p.theta
            .iter()
            .zip(&p.rho)
            .map(|(t, r)| (r - cheb_eval(th, v, *t)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn rho_equations_match_direct_substitution() {
        // arbitrary positive ρ with analytic derivatives; ξ-derivatives by central differences
        let rho = |t: f64| 0.7 + 0.2 * t.sin() + 0.1 * (2.0 * t).cos();
        let d1 = |t: f64| 0.2 * t.cos() - 0.2 * (2.0 * t).sin();
        let d2 = |t: f64| -0.2 * t.sin() - 0.4 * (2.0 * t).cos();
        let h = 1e-4;
        for &t in &[0.3, 0.9, 1.4] {
            let eta = |s: f64| rho(s).powf(-0.5);
            let eta2 = (eta(t + h) - 2.0 * eta(t) + eta(t - h)) / (h * h);
            let direct = eta2 + 0.25 * eta(t) - 0.75 * eta(t).powi(5);
            assert!((eta_residual(rho(t), d1(t), d2(t)) - direct).abs() < 1e-6);
            let back = -0.5 * rho(t).powf(-2.5) * wedge_rho_residual(rho(t), d1(t), d2(t));
            assert!((back - direct).abs() < 1e-6);
            for n in [3usize, 4, 5] {
                let k = (n as f64 - 2.0) / 2.0;
                let xi = |s: f64| rho(s).powf(-k);
                let xi1 = (xi(t + h) - xi(t - h)) / (2.0 * h);
                let xi2 = (xi(t + h) - 2.0 * xi(t) + xi(t - h)) / (h * h);
                let lap_xi = xi2 + (n as f64 - 2.0) * t.cos() / t.sin() * xi1;
                let direct = lap_xi - k * k * xi(t) - k * (k + 1.0) * xi(t).powf((n as f64 + 2.0) / (n as f64 - 2.0));
                let lap_rho = d2(t) + (n as f64 - 2.0) * t.cos() / t.sin() * d1(t);
                assert!((xi_residual(n, rho(t), d1(t), lap_rho) - direct).abs() < 1e-5 * (1.0 + direct.abs()));
                let back = -k * rho(t).powf(-k - 2.0) * cap_rho_residual(n, rho(t), d1(t), lap_rho);
                assert!((back - direct).abs() < 1e-5 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn vanishing_slope_from_the_equation() {
        // at ρ = 0 both ρ-equations force |ρ'| = 1
        assert_eq!(wedge_rho_residual(0.0, 1.0, 5.0), 0.0);
        for n in 3..7 {
            assert_eq!(cap_rho_residual(n, 0.0, 1.0, 5.0), 0.0);
        }
    }

    #[test]
    fn sin_power_integrals() {
        for m in 0..6 {
            let (a, b) = (0.2, 1.1);
            let steps = 20000;
            let h = (b - a) / steps as f64;
            let mut s = 0.0;
            for i in 0..steps {
                let t = a + (i as f64 + 0.5) * h;
                s += t.sin().powi(m as i32) * h;
            }
            assert!((sin_power_integral(m, a, b) - s).abs() < 1e-8);
        }
    }

    #[test]
    fn flat_wedge_is_sine() {
        let p = solve_wedge(PI, 128).unwrap();
        for (t, r) in p.theta.iter().zip(&p.rho) {
            assert!((r - t.sin()).abs() < 1e-9);
        }
        let slopes = p.endpoint_slopes();
        assert!(slopes.iter().all(|s| (s - 1.0).abs() < 1e-3));
        let eta_mid = p.eval_cone_solution(1.0, PI / 2.0).unwrap();
        assert!((eta_mid - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wedge_matches_collocation_oracle() {
        let alpha = PI / 2.0;
        let p = solve_wedge(alpha, 128).unwrap();
        let (th, v) = collocation(ProfileKind::Wedge, 3, alpha, 96);
        assert!(sup_vs_oracle(&p, &th, &v) < 1e-6);
    }

    #[test]
    fn cap_hemisphere_is_cosine() {
        for n in [3, 4, 5] {
            let p = solve_cap(n, PI / 2.0, 128).unwrap();
            for (t, r) in p.theta.iter().zip(&p.rho) {
                assert!((r - t.cos()).abs() < 1e-8, "n={n}");
            }
        }
    }

    #[test]
    fn cap_matches_collocation_oracle() {
        for n in [3, 4] {
            let alpha = PI / 3.0;
            let p = solve_cap(n, alpha, 128).unwrap();
            let (th, v) = collocation(ProfileKind::Cap, n, alpha, 96);
            assert!(sup_vs_oracle(&p, &th, &v) < 1e-6, "n={n}");
        }
    }

    #[test]
    fn large_caps_solve() {
        for a in [0.6, 0.75, 0.9] {
            let p = solve_cap(3, a * PI, 256).unwrap();
            assert!(p.rho[0] > 1.0);
        }
    }

    #[test]
    fn half_space_value_and_homogeneity() {
        let p = solve_cap(3, PI / 2.0, 128).unwrap();
        // point at distance d from the plane: y = (x', d)
        for &(x0, d) in &[(0.3, 0.5), (1.0, 0.01), (0.0, 2.0)] {
            let r: f64 = (x0 * x0 + d * d) as f64;
            let t = (d / r.sqrt()).acos();
            let u = p.eval_cone_solution(r.sqrt(), t).unwrap();
            assert!((u - 1.0 / d.sqrt()).abs() < 1e-7 / d.sqrt());
            let u2 = p.eval_cone_solution(2.0 * r.sqrt(), t).unwrap();
            assert!((u2 - u * 2f64.powf(-0.5)).abs() < 1e-14 * u);
        }
    }

    #[test]
    fn cartesian_jet_matches_finite_differences() {
        let p = solve_cap(3, PI / 3.0, 256).unwrap();
        let y = [0.2, 0.15, 0.5];
        let (u, g, hm) = p.cartesian_jet(&y).unwrap();
        let h = 1e-4;
        for k in 0..3 {
            let mut yp = y;
            let mut ym = y;
            yp[k] += h;
            ym[k] -= h;
            let (up, gp, _) = p.cartesian_jet(&yp).unwrap();
            let (um, gm, _) = p.cartesian_jet(&ym).unwrap();
            assert!(((up - um) / (2.0 * h) - g[k]).abs() < 1e-5 * u);
            for i in 0..3 {
                assert!(((gp[i] - gm[i]) / (2.0 * h) - hm[(i, k)]).abs() < 1e-3 * u);
            }
        }
        // on the axis the Hessian is still symmetric and finite
        let (_, _, h0) = p.cartesian_jet(&[0.0, 0.0, 0.5]).unwrap();
        assert!((h0[(0, 0)] - h0[(1, 1)]).abs() < 1e-10);
    }

    #[test]
    fn f_v_examples() {
        let p = solve_wedge(PI / 2.0, 128).unwrap();
        let s = 0.3;
        let (t, r) = wedge_point_from_distances(PI / 2.0, s, s);
        assert!((t - PI / 4.0).abs() < 1e-14 && (r - s * 2f64.sqrt()).abs() < 1e-14);
        let f = f_v(&p, s, s).unwrap();
        let direct = (s * 2f64.sqrt()).powf(-0.5) * p.rho[64].powf(-0.5);
        assert!((f - direct).abs() < 1e-12 * f);
        let f2 = f_v(&p, 2.0 * s, 2.0 * s).unwrap();
        assert!((f2 - f * 2f64.powf(-0.5)).abs() < 1e-12 * f);
        assert!(f_v(&p, -1.0, 1.0).is_err());
        let flat = solve_wedge(PI - 1e-9, 128);
        assert!(flat.is_ok());
    }

    #[test]
    fn f_v_closed_form_inversion() {
        for &(a, d1, d2) in &[(0.3, 0.1, 0.2), (2.5, 1.0, 0.01), (1.0, 3.0, 3.0)] {
            let (t, r) = wedge_point_from_distances(a, d1, d2);
            let tc = (d2 * f64::sin(a)).atan2(d1 + d2 * f64::cos(a));
            assert!((t - tc).abs() < 1e-13);
            assert!((r * (a - t).sin() - d1).abs() < 1e-12 * d1.max(1.0));
        }
    }

    #[test]
    fn errors() {
        assert!(solve_wedge(0.0, 128).is_err());
        assert!(solve_wedge(3.2, 128).is_err());
        assert!(solve_cap(3, PI, 128).is_err());
        assert!(solve_wedge(1.0, 32).is_err());
        assert!(solve_cap(2, 1.0, 128).is_err());
        let p = solve_cap(3, 1.0, 64).unwrap();
        assert!(p.eval_cone_solution(1.0, 1.2).is_err());
        assert!(p.eval_cone_solution(-1.0, 0.5).is_err());
    }
}
