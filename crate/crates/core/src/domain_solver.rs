//! Blow-up solutions on Euclidean domains: radial balls, axisymmetric
//! perturbed cones, and the barrier inequality near a conical point.
//!
//! All solvers work with `w = u^{-2/(n-2)}`, which vanishes on the boundary
//! and satisfies `w ℒw = (n/2) a(∇w, ∇w) − n/2` for `ℒ = a_{ij}∂_{ij} + b_i∂_i`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cone_profiles::{cap_cartesian, interp_uniform, ConeJet, ProfileKind, RadialProfile};
use crate::error::{Error, Result, StageExt};
use crate::geometry::{DiffeoMap, MapKind};
use crate::linalg::{Csr, Triplets};
use crate::newton::{newton, NewtonOptions, NonlinearSystem};

fn kexp(n: usize) -> f64 {
    (n as f64 - 2.0) / 2.0
}

/// `w` of the ball solution `u_s = (2s/(s² − r²))^{(n−2)/2}`.
pub fn ball_w(s: f64, r: f64) -> f64 {
    (s * s - r * r) / (2.0 * s)
}

/// Radial blow-up solution on a ball.
#[derive(Debug, Clone, Serialize)]
pub struct BlowupSolution {
    pub n: usize,
    pub radius: f64,
    pub r: Vec<f64>,
    pub w: Vec<f64>,
    /// Relative residual of `Δu = (n(n−2)/4)u^{(n+2)/(n−2)}` away from the boundary.
    pub residual: f64,
    pub newton_iterations: usize,
}

impl BlowupSolution {
    pub fn u(&self) -> Vec<f64> {
        let k = kexp(self.n);
        self.w.iter().map(|w| w.powf(-k)).collect()
    }

    /// Largest `|w − w_exact|`.
    pub fn w_error(&self) -> f64 {
        self.r
            .iter()
            .zip(&self.w)
            .map(|(r, w)| (w - ball_w(self.radius, *r)).abs())
            .fold(0.0, f64::max)
    }

    /// Largest relative error of `u` against `u_s` away from the last two cells.
    pub fn u_error(&self) -> f64 {
        let k = kexp(self.n);
        let m = self.r.len();
        (0..m.saturating_sub(3))
            .map(|i| {
                let ex = ball_w(self.radius, self.r[i]).powf(-k);
                (self.w[i].powf(-k) - ex).abs() / ex
            })
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let u = self.u();
        let mut s = String::from("r,w,u\n");
        for i in 0..self.r.len() {
            s.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", self.r[i], self.w[i], u[i]));
        }
        s
    }
}

struct BallSystem {
    n: usize,
    h: f64,
    big_n: usize,
    face: Vec<f64>,
    volume: Vec<f64>,
}

impl BallSystem {
    fn new(n: usize, s: f64, big_n: usize) -> Self {
        let h = s / big_n as f64;
        let nf = n as f64;
        let face: Vec<f64> = (0..big_n).map(|i| ((i as f64 + 0.5) * h).powi(n as i32 - 1)).collect();
        let volume: Vec<f64> = (0..big_n)
            .map(|i| {
                let hi = ((i as f64 + 0.5) * h).powi(n as i32);
                let lo = if i == 0 { 0.0 } else { ((i as f64 - 0.5) * h).powi(n as i32) };
                (hi - lo) / nf
            })
            .collect();
        Self { n, h, big_n, face, volume }
    }

    fn at(w: &[f64], i: usize) -> f64 {
        if i < w.len() {
            w[i]
        } else {
            0.0
        }
    }
}

impl NonlinearSystem for BallSystem {
    fn residual(&self, w: &[f64]) -> Vec<f64> {
        let nh = self.n as f64 / 2.0;
        let h = self.h;
        (0..self.big_n)
            .map(|i| {
                let wp = Self::at(w, i + 1);
                let (lap, d1) = if i == 0 {
                    (self.face[0] * (wp - w[0]) / (h * self.volume[0]), 0.0)
                } else {
                    let f = self.face[i] * (wp - w[i]) - self.face[i - 1] * (w[i] - w[i - 1]);
                    (f / (h * self.volume[i]), (wp - w[i - 1]) / (2.0 * h))
                };
                w[i] * lap - nh * d1 * d1 + nh
            })
            .collect()
    }

    fn jacobian(&self, w: &[f64]) -> Csr {
        let nh = self.n as f64 / 2.0;
        let h = self.h;
        let m = self.big_n;
        let mut t = Triplets::with_capacity(m, m, 3 * m);
        for i in 0..m {
            let wp = Self::at(w, i + 1);
            if i == 0 {
                let c = self.face[0] / (h * self.volume[0]);
                t.push(0, 0, c * (wp - w[0]) - c * w[0]);
                if m > 1 {
                    t.push(0, 1, c * w[0]);
                }
                continue;
            }
            let v = h * self.volume[i];
            let (fp, fm) = (self.face[i] / v, self.face[i - 1] / v);
            let lap = fp * (wp - w[i]) - fm * (w[i] - w[i - 1]);
            let d1 = (wp - w[i - 1]) / (2.0 * h);
            t.push(i, i, lap - w[i] * (fp + fm));
            t.push(i, i - 1, w[i] * fm + nh * d1 / h);
            if i + 1 < m {
                t.push(i, i + 1, w[i] * fp - nh * d1 / h);
            }
        }
        t.to_csr()
    }
}

/// Solves the radial `w`-equation on `B_s ⊂ R^n` with `N` cells.
///
/// The scheme is conservative with exact cell volumes; it reproduces the
/// quadratic `w = (s² − r²)/(2s)` exactly.
pub fn solve_ball(n: usize, s: f64, big_n: usize) -> Result<BlowupSolution> {
    if n < 3 {
        return Err(Error::invalid("the ball problem needs n >= 3"));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("radius {s} must be positive")));
    }
    if big_n < 4 {
        return Err(Error::invalid("need at least four cells"));
    }
    let sys = BallSystem::new(n, s, big_n);
    let h = sys.h;
    let x0: Vec<f64> = (0..big_n).map(|i| 0.6 * (s - i as f64 * h)).collect();
    let opts = NewtonOptions {
        tol: 1e-12 * (1.0 + s),
        ..NewtonOptions::default()
    };
    let rep = newton(&sys, x0, opts, "ball solve")?;
    let mut w = rep.x;
    w.push(0.0);
    let r: Vec<f64> = (0..=big_n).map(|i| i as f64 * h).collect();
    let res = sys.residual(&w[..big_n]);
    let residual = 2.0 / n as f64 * res[..big_n.saturating_sub(2)].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(BlowupSolution {
        n,
        radius: s,
        r,
        w,
        residual,
        newton_iterations: rep.iterations,
    })
}

/// Meridian section of `Ω ∩ {r_in < |Tx| < r_out}` for `Ω = T⁻¹(V)`, with `V`
/// the rotational cone of opening `α` and `T` an axisymmetric map.
///
/// The grid is uniform in `(ln|Tx|, Θ)`, where `Θ` is the polar angle of `Tx`.
#[derive(Debug, Clone, Serialize)]
pub struct MeridianDomain {
    pub n: usize,
    pub alpha: f64,
    pub map: DiffeoMap,
    pub r_in: f64,
    pub r_out: f64,
    pub n_s: usize,
    pub n_theta: usize,
}

impl MeridianDomain {
    pub fn new(n: usize, alpha: f64, map: DiffeoMap, r_in: f64, r_out: f64, n_s: usize, n_theta: usize) -> Result<Self> {
        if n < 3 || map.n != n {
            return Err(Error::invalid("map and domain dimensions differ or n < 3"));
        }
        if !matches!(map.kind, MapKind::Identity | MapKind::Example1 { .. } | MapKind::Ball { .. }) {
            return Err(Error::invalid("meridian solves need an axisymmetric map"));
        }
        if !(alpha > 0.0 && alpha < std::f64::consts::PI) {
            return Err(Error::invalid(format!("opening angle {alpha} outside (0, π)")));
        }
        if !(r_in > 0.0 && r_in < r_out) {
            return Err(Error::invalid("need 0 < r_in < r_out"));
        }
        if r_out > 0.5 * map.validity_radius {
            return Err(Error::invalid(format!(
                "r_out = {r_out} exceeds half the map's validity radius {}",
                map.validity_radius
            )));
        }
        if n_s < 8 || n_theta < 8 {
            return Err(Error::invalid("meridian grid needs at least 8 cells per direction"));
        }
        Ok(Self {
            n,
            alpha,
            map,
            r_in,
            r_out,
            n_s,
            n_theta,
        })
    }

    pub fn s(&self) -> Vec<f64> {
        let (a, b) = (self.r_in.ln(), self.r_out.ln());
        (0..=self.n_s).map(|i| a + (b - a) * i as f64 / self.n_s as f64).collect()
    }

    pub fn theta(&self) -> Vec<f64> {
        (0..=self.n_theta).map(|j| self.alpha * j as f64 / self.n_theta as f64).collect()
    }

    fn hs(&self) -> f64 {
        (self.r_out.ln() - self.r_in.ln()) / self.n_s as f64
    }

    fn ht(&self) -> f64 {
        self.alpha / self.n_theta as f64
    }

    /// Cone-frame point `y` at `(r, Θ)` in the meridian `φ = 0`.
    pub fn cone_point(&self, r: f64, t: f64) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        y[0] = r * t.sin();
        y[self.n - 1] = r * t.cos();
        y
    }

    /// Physical point `x = T⁻¹y`.
    pub fn physical_point(&self, r: f64, t: f64) -> Result<Vec<f64>> {
        self.map.inverse(&self.cone_point(r, t))
    }
}

/// Coefficients of the `ω = w/r` equation
/// `ω·D(ω) − (n/2)(β_rr X² + 2β_rt XY + β_tt Y²) + n/2 = 0`, with
/// `D = α_ss∂_ss + α_s∂_s + α_st∂_sΘ + α_tt∂_ΘΘ + α_t∂_Θ + α_0`, `X = ω + ω_s`, `Y = ω_Θ`.
#[derive(Debug, Clone, Copy, Default)]
struct NodeCoefficients {
    ss: f64,
    s: f64,
    st: f64,
    tt: f64,
    t: f64,
    zero: f64,
    brr: f64,
    brt: f64,
    btt: f64,
}

fn node_coefficients(map: &DiffeoMap, n: usize, r: f64, t: f64) -> Result<NodeCoefficients> {
    let mut y = vec![0.0; n];
    y[0] = r * t.sin();
    y[n - 1] = r * t.cos();
    let (a, b) = map.pullback_coefficients(&y)?;
    let slot = |k: usize| -> (f64, DVector<f64>) {
        let mut j = ConeJet {
            u: 0.0,
            u_r: 0.0,
            u_t: 0.0,
            u_rr: 0.0,
            u_rt: 0.0,
            u_tt: 0.0,
            cot_u_t: 0.0,
        };
        match k {
            0 => j.u_r = 1.0,
            1 => j.u_t = 1.0,
            2 => j.u_rr = 1.0,
            3 => j.u_rt = 1.0,
            4 => j.u_tt = 1.0,
            _ => j.cot_u_t = 1.0,
        }
        let (_, g, h) = cap_cartesian(&y, &j);
        (a.component_mul(&h).sum() + b.dot(&g), g)
    };
    let (c_r, g_r) = slot(0);
    let (c_t, g_t) = slot(1);
    let (c_rr, _) = slot(2);
    let (c_rt, _) = slot(3);
    let (c_tt, _) = slot(4);
    let (c_ct, _) = slot(5);
    let axis = t < 1e-12;
    let quad = |u: &DVector<f64>, v: &DVector<f64>| (u.transpose() * &a * v)[(0, 0)];
    Ok(NodeCoefficients {
        ss: c_rr,
        s: c_rr + r * c_r,
        st: r * c_rt,
        tt: r * r * (c_tt + if axis { c_ct } else { 0.0 }),
        t: if axis { 0.0 } else { r * c_rt + r * r * c_t + r * r * c_ct * t.cos() / t.sin() },
        zero: r * c_r,
        brr: quad(&g_r, &g_r),
        brt: r * quad(&g_r, &g_t),
        btt: r * r * quad(&g_t, &g_t),
    })
}

/// One nine-point stencil entry: offsets and weights in `D`, `X`, `Y`.
type StencilEntry = (isize, isize, f64, f64, f64);

fn stencil(c: &NodeCoefficients, axis: bool, hs: f64, ht: f64, with_s: bool) -> Vec<StencilEntry> {
    let mut e: Vec<StencilEntry> = Vec::with_capacity(9);
    let hs2 = hs * hs;
    let ht2 = ht * ht;
    let mut center_d = c.zero - 2.0 * c.tt / ht2;
    if with_s {
        center_d -= 2.0 * c.ss / hs2;
        for sgn in [-1.0, 1.0] {
            e.push((sgn as isize, 0, c.ss / hs2 + sgn * c.s / (2.0 * hs), sgn / (2.0 * hs), 0.0));
        }
    }
    e.push((0, 0, center_d, 1.0, 0.0));
    if axis {
        e.push((0, 1, 2.0 * c.tt / ht2, 0.0, 0.0));
    } else {
        for sgn in [-1.0, 1.0] {
            e.push((0, sgn as isize, c.tt / ht2 + sgn * c.t / (2.0 * ht), 0.0, sgn / (2.0 * ht)));
        }
        if with_s {
            for si in [-1isize, 1] {
                for tj in [-1isize, 1] {
                    e.push((si, tj, c.st * (si * tj) as f64 / (4.0 * hs * ht), 0.0, 0.0));
                }
            }
        }
    }
    e
}

/// Grid equation shared by the meridian problem and its `s`-independent cone
/// reference; values are stored on the full `(K+1)×(M+1)` grid.
struct MeridianSystem {
    n: usize,
    rows: usize,
    cols: usize,
    /// Interior rows `first..rows-1`; rows outside hold Dirichlet data.
    first: usize,
    coef: Vec<NodeCoefficients>,
    stencils: Vec<Vec<StencilEntry>>,
    data: Vec<f64>,
}

impl MeridianSystem {
    fn unknowns(&self) -> usize {
        (self.last() - self.first) * (self.cols - 1)
    }

    fn last(&self) -> usize {
        if self.first == 0 {
            self.rows
        } else {
            self.rows - 1
        }
    }

    fn unknown(&self, i: usize, j: usize) -> Option<usize> {
        if i < self.first || i >= self.last() || j + 1 >= self.cols {
            None
        } else {
            Some((i - self.first) * (self.cols - 1) + j)
        }
    }

    fn full(&self, x: &[f64]) -> Vec<f64> {
        let mut f = self.data.clone();
        for i in self.first..self.last() {
            for j in 0..self.cols - 1 {
                f[i * self.cols + j] = x[self.unknown(i, j).unwrap()];
            }
        }
        f
    }

    fn local(&self, f: &[f64], i: usize, j: usize) -> (usize, f64, f64, f64, f64) {
        let k = (i - self.first) * (self.cols - 1) + j;
        let st = &self.stencils[k];
        let (mut d, mut x, mut y) = (0.0, 0.0, 0.0);
        for &(di, dj, wd, wx, wy) in st {
            let v = f[(i as isize + di) as usize * self.cols + (j as isize + dj) as usize];
            d += wd * v;
            x += wx * v;
            y += wy * v;
        }
        (k, f[i * self.cols + j], d, x, y)
    }
}

impl NonlinearSystem for MeridianSystem {
    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let f = self.full(x);
        let nh = self.n as f64 / 2.0;
        let mut out = vec![0.0; self.unknowns()];
        for i in self.first..self.last() {
            for j in 0..self.cols - 1 {
                let (k, w, d, xx, yy) = self.local(&f, i, j);
                let c = &self.coef[k];
                out[k] = w * d - nh * (c.brr * xx * xx + 2.0 * c.brt * xx * yy + c.btt * yy * yy) + nh;
            }
        }
        out
    }

    fn jacobian(&self, x: &[f64]) -> Csr {
        let f = self.full(x);
        let nh = self.n as f64 / 2.0;
        let m = self.unknowns();
        let mut t = Triplets::with_capacity(m, m, 9 * m);
        for i in self.first..self.last() {
            for j in 0..self.cols - 1 {
                let (k, w, d, xx, yy) = self.local(&f, i, j);
                let c = &self.coef[k];
                let gx = 2.0 * (c.brr * xx + c.brt * yy);
                let gy = 2.0 * (c.brt * xx + c.btt * yy);
                for &(di, dj, wd, wx, wy) in &self.stencils[k] {
                    let (ii, jj) = ((i as isize + di) as usize, (j as isize + dj) as usize);
                    if let Some(col) = self.unknown(ii, jj) {
                        let mut v = w * wd - nh * (gx * wx + gy * wy);
                        if di == 0 && dj == 0 {
                            v += d;
                        }
                        t.push(k, col, v);
                    }
                }
            }
        }
        t.to_csr()
    }
}

fn meridian_options() -> NewtonOptions {
    NewtonOptions {
        tol: 1e-12,
        max_iter: 60,
        floor: Some(1e-14),
        step_tol: 1e-13,
    }
}

/// `ρ` of the flat cone in the meridian discretization: the `s`-independent
/// solution of the grid equation with identity coefficients.
pub fn discrete_cone_reference(n: usize, alpha: f64, n_theta: usize, guess: &RadialProfile) -> Result<Vec<f64>> {
    let ht = alpha / n_theta as f64;
    let id = DiffeoMap::identity(n);
    let mut coef = Vec::with_capacity(n_theta);
    let mut stencils = Vec::with_capacity(n_theta);
    for j in 0..n_theta {
        let t = j as f64 * ht;
        let c = node_coefficients(&id, n, 1.0, t)?;
        stencils.push(stencil(&c, j == 0, 1.0, ht, false));
        coef.push(c);
    }
    let sys = MeridianSystem {
        n,
        rows: 1,
        cols: n_theta + 1,
        first: 0,
        coef,
        stencils,
        data: vec![0.0; n_theta + 1],
    };
    let x0: Vec<f64> = (0..n_theta)
        .map(|j| guess.interp(j as f64 * ht).map(|v| v.0.max(1e-6)))
        .collect::<Result<_>>()?;
    let rep = newton(&sys, x0, meridian_options(), "discrete cone reference")?;
    let mut out = rep.x;
    out.push(0.0);
    Ok(out)
}

/// Boundary data on the inner and outer arcs of the meridian domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundaryData {
    /// `u = u_V(1 + ε)` on both arcs (`ε` scaled by `r/r_out` on the inner one).
    Cone { eps: f64 },
    /// The exact ball solution (only for the ball map with `α = π/2`).
    ExactBall,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeridianSolution {
    pub n: usize,
    pub s: Vec<f64>,
    pub theta: Vec<f64>,
    /// `ω = w/|Tx|`, row-major in `(s, Θ)`.
    pub omega: Vec<f64>,
    /// Relative residual of the `u`-equation away from two boundary cells.
    pub residual: f64,
    pub newton_iterations: usize,
}

impl MeridianSolution {
    pub fn cols(&self) -> usize {
        self.theta.len()
    }

    pub fn omega_at(&self, i: usize, j: usize) -> f64 {
        self.omega[i * self.cols() + j]
    }

    pub fn w_at(&self, i: usize, j: usize) -> f64 {
        self.s[i].exp() * self.omega_at(i, j)
    }

    pub fn u_at(&self, i: usize, j: usize) -> f64 {
        self.w_at(i, j).powf(-kexp(self.n))
    }

    /// Rows `(r_cyl, z, w, u)` in physical coordinates.
    pub fn to_csv(&self, domain: &MeridianDomain) -> Result<String> {
        let mut out = String::from("r_cyl,z,w,u\n");
        let n = self.n;
        for i in 0..self.s.len() {
            for j in 0..self.cols() {
                let x = domain.physical_point(self.s[i].exp(), self.theta[j])?;
                let rc = x[..n - 1].iter().map(|v| v * v).sum::<f64>().sqrt();
                let w = self.w_at(i, j);
                let u = if w > 0.0 { self.u_at(i, j) } else { f64::INFINITY };
                out.push_str(&format!("{:.12e},{:.12e},{:.12e},{:.12e}\n", rc, x[n - 1], w, u));
            }
        }
        Ok(out)
    }
}

fn ball_omega(domain: &MeridianDomain, r: f64, t: f64) -> Result<f64> {
    let radius = match domain.map.kind {
        MapKind::Ball { radius } => radius,
        _ => return Err(Error::invalid("exact ball data needs the ball map")),
    };
    let x = domain.physical_point(r, t)?;
    let n = domain.n;
    let q: f64 = (0..n)
        .map(|i| {
            let c = if i == n - 1 { radius } else { 0.0 };
            (x[i] - c).powi(2)
        })
        .sum();
    Ok((radius * radius - q) / (2.0 * radius) / r)
}

/// Solves the meridian problem with prescribed arc data (`ω` per `Θ` node on
/// the inner and outer arcs).
fn solve_meridian(domain: &MeridianDomain, reference: &[f64], inner: &[f64], outer: &[f64]) -> Result<MeridianSolution> {
    let s = domain.s();
    let theta = domain.theta();
    let (rows, cols) = (s.len(), theta.len());
    let (hs, ht) = (domain.hs(), domain.ht());
    let mut data = vec![0.0; rows * cols];
    for j in 0..cols {
        data[j] = inner[j];
        data[(rows - 1) * cols + j] = outer[j];
    }
    let mut coef = Vec::with_capacity((rows - 2) * (cols - 1));
    let mut stencils = Vec::with_capacity((rows - 2) * (cols - 1));
    for si in s.iter().take(rows - 1).skip(1) {
        for (j, &t) in theta.iter().enumerate().take(cols - 1) {
            let c = node_coefficients(&domain.map, domain.n, si.exp(), t)?;
            stencils.push(stencil(&c, j == 0, hs, ht, true));
            coef.push(c);
        }
    }
    let sys = MeridianSystem {
        n: domain.n,
        rows,
        cols,
        first: 1,
        coef,
        stencils,
        data,
    };
    let mut x0 = Vec::with_capacity(sys.unknowns());
    for _ in 1..rows - 1 {
        x0.extend_from_slice(&reference[..cols - 1]);
    }
    let rep = newton(&sys, x0, meridian_options(), "meridian solve")?;
    let res = sys.residual(&rep.x);
    let mut worst = 0.0f64;
    for i in 3..rows.saturating_sub(3) {
        for j in 0..cols.saturating_sub(3) {
            worst = worst.max(res[sys.unknown(i, j).unwrap()].abs());
        }
    }
    let omega = sys.full(&rep.x);
    Ok(MeridianSolution {
        n: domain.n,
        s,
        theta,
        omega,
        residual: 2.0 / domain.n as f64 * worst,
        newton_iterations: rep.iterations,
    })
}

/// A pair of meridian solves whose arc data bracket the true solution.
#[derive(Debug, Clone, Serialize)]
pub struct BracketedSolution {
    pub domain: MeridianDomain,
    pub data: BoundaryData,
    /// Solve with the smaller `u` data.
    pub lower: MeridianSolution,
    /// Solve with the larger `u` data.
    pub upper: MeridianSolution,
    /// Discrete cone reference `ρ_h(Θ)` on the meridian grid.
    pub reference: Vec<f64>,
    /// `max |ρ_h/ρ − 1|` against the profile, away from two boundary cells.
    pub reference_error: f64,
    /// Largest relative gap of `u` between the two solves over interior nodes.
    pub max_gap: f64,
}

/// Solves on the meridian domain with bracketing data `u_V(1 ∓ ε)` on the
/// outer arc (and `ε·r_in/r_out` on the inner arc), or with exact ball data.
pub fn solve_axisymmetric(domain: &MeridianDomain, profile: &RadialProfile, data: BoundaryData) -> Result<BracketedSolution> {
    if profile.kind != ProfileKind::Cap || profile.n != domain.n || (profile.alpha - domain.alpha).abs() > 1e-12 {
        return Err(Error::invalid("profile does not match the meridian domain"));
    }
    let reference = discrete_cone_reference(domain.n, domain.alpha, domain.n_theta, profile).stage("cone reference")?;
    let theta = domain.theta();
    let cols = theta.len();
    let mut reference_error = 0.0f64;
    for j in 0..cols.saturating_sub(3) {
        let (r, _, _) = profile.interp(theta[j])?;
        reference_error = reference_error.max((reference[j] / r - 1.0).abs());
    }
    let k = kexp(domain.n);
    let scaled = |e: f64| -> Vec<f64> { reference.iter().map(|r| r * (1.0 + e).powf(-1.0 / k)).collect() };
    let (lower, upper) = match data {
        BoundaryData::Cone { eps } => {
            if !(eps >= 0.0 && eps < 0.5) {
                return Err(Error::invalid(format!("bracket width {eps} outside [0, 0.5)")));
            }
            let e_in = eps * domain.r_in / domain.r_out;
            let (lo_in, lo_out, up_in, up_out) = (scaled(-e_in), scaled(-eps), scaled(e_in), scaled(eps));
            let (lower, upper) = std::thread::scope(|sc| {
                let h = sc.spawn(|| solve_meridian(domain, &reference, &lo_in, &lo_out));
                let upper = solve_meridian(domain, &reference, &up_in, &up_out);
                (h.join().unwrap_or_else(|_| Err(Error::domain("lower bracket solve panicked"))), upper)
            });
            (lower.stage("lower bracket")?, upper.stage("upper bracket")?)
        }
        BoundaryData::ExactBall => {
            if (domain.alpha - std::f64::consts::FRAC_PI_2).abs() > 1e-12 {
                return Err(Error::invalid("the ball maps onto the half-space cone"));
            }
            let arc = |r: f64| -> Result<Vec<f64>> {
                theta
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| if j + 1 == cols { Ok(0.0) } else { ball_omega(domain, r, t) })
                    .collect()
            };
            let sol = solve_meridian(domain, &reference, &arc(domain.r_in)?, &arc(domain.r_out)?)?;
            (sol.clone(), sol)
        }
    };
    let mut max_gap = 0.0f64;
    for i in 1..lower.s.len() - 1 {
        for j in 0..cols.saturating_sub(3) {
            max_gap = max_gap.max((lower.u_at(i, j) / upper.u_at(i, j) - 1.0).abs());
        }
    }
    Ok(BracketedSolution {
        domain: domain.clone(),
        data,
        lower,
        upper,
        reference,
        reference_error,
        max_gap,
    })
}

impl BracketedSolution {
    /// `u(x)/u_V(Tx)` of both solves at node `(i, j)`.
    pub fn ratios(&self, i: usize, j: usize) -> (f64, f64) {
        let k = kexp(self.domain.n);
        let r = self.reference[j];
        (
            (r / self.lower.omega_at(i, j)).powf(k),
            (r / self.upper.omega_at(i, j)).powf(k),
        )
    }

    /// Largest `|u/u_s − 1|` against the exact ball solution over interior nodes.
    pub fn exact_ball_error(&self) -> Result<f64> {
        let k = kexp(self.domain.n);
        let cols = self.lower.cols();
        let mut e = 0.0f64;
        for i in 1..self.lower.s.len() - 1 {
            let r = self.lower.s[i].exp();
            for j in 0..cols.saturating_sub(3) {
                let ex = ball_omega(&self.domain, r, self.lower.theta[j])?;
                e = e.max(((ex / self.lower.omega_at(i, j)).powf(k) - 1.0).abs());
            }
        }
        Ok(e)
    }
}

/// `(d, |u/u_V∘T − 1 [− c₁|Tx|]|)` per radius, with the bracketing gap.
#[derive(Debug, Clone, Serialize)]
pub struct RatioProfile {
    /// `d = |x|` at the node attaining the maximum.
    pub d: Vec<f64>,
    pub r: Vec<f64>,
    /// Max over `Θ` (away from two boundary cells) of the midpoint error.
    pub error: Vec<f64>,
    /// Max over `Θ` of the gap between the two solves' ratios.
    pub gap: Vec<f64>,
    pub trusted: Vec<bool>,
    pub subtracted: bool,
}

pub const TRUST_FRACTION: f64 = 0.01;
pub const EXCLUDED_CELLS: usize = 3;

/// Samples the ratio along the radial grid lines. With `c1`, subtracts
/// `c₁(Θ)|Tx|` (axisymmetric `c₁` evaluated in the meridian).
pub fn ratio_profile(sol: &BracketedSolution, c1: Option<&dyn Fn(f64) -> f64>) -> Result<RatioProfile> {
    let rows = sol.lower.s.len();
    let cols = sol.lower.cols();
    let mut out = RatioProfile {
        d: Vec::new(),
        r: Vec::new(),
        error: Vec::new(),
        gap: Vec::new(),
        trusted: Vec::new(),
        subtracted: c1.is_some(),
    };
    let c1v: Option<Vec<f64>> = c1.map(|f| sol.lower.theta.iter().map(|&t| f(t)).collect());
    for i in EXCLUDED_CELLS + 1..rows - 1 - EXCLUDED_CELLS {
        let r = sol.lower.s[i].exp();
        let (mut best, mut arg, mut gap) = (0.0f64, 0usize, 0.0f64);
        for j in 0..cols - 3 {
            let (a, b) = sol.ratios(i, j);
            let mut e = 0.5 * (a + b) - 1.0;
            if let Some(c) = &c1v {
                e -= c[j] * r;
            }
            if e.abs() >= best {
                best = e.abs();
                arg = j;
            }
            gap = gap.max((a - b).abs());
        }
        let x = sol.domain.physical_point(r, sol.lower.theta[arg])?;
        out.d.push(x.iter().map(|v| v * v).sum::<f64>().sqrt());
        out.r.push(r);
        out.error.push(best);
        out.gap.push(gap);
        out.trusted.push(gap < TRUST_FRACTION * best);
    }
    if !out.trusted.iter().any(|t| *t) {
        return Err(Error::Certification("no sample lies in the bracket-trusted region".into()));
    }
    Ok(out)
}

/// Ratio profile from three solves on grids `N/4`, `N/2`, `N` with the same
/// region: values at the coarse nodes are Richardson-extrapolated from the two
/// finest grids, and the change against the extrapolation from the two
/// coarsest grids is added to the bracketing gap before the trust test.
pub fn ratio_profile_refined(levels: [&BracketedSolution; 3], c1: Option<&dyn Fn(f64) -> f64>) -> Result<RatioProfile> {
    let [c, m, f] = levels;
    let (rc, cc) = (c.lower.s.len(), c.lower.cols());
    for (lv, q) in [(m, 2), (f, 4)] {
        if lv.lower.s.len() != q * (rc - 1) + 1 || lv.lower.cols() != q * (cc - 1) + 1 {
            return Err(Error::invalid("refinement levels must halve the grid spacing"));
        }
        if (lv.domain.r_in - c.domain.r_in).abs() > 0.0 || (lv.domain.r_out - c.domain.r_out).abs() > 0.0 {
            return Err(Error::invalid("refinement levels must share the region"));
        }
    }
    let mid = |s: &BracketedSolution, i: usize, j: usize| {
        let (a, b) = s.ratios(i, j);
        (0.5 * (a + b), (a - b).abs())
    };
    let mut out = RatioProfile {
        d: Vec::new(),
        r: Vec::new(),
        error: Vec::new(),
        gap: Vec::new(),
        trusted: Vec::new(),
        subtracted: c1.is_some(),
    };
    for i in 2..rc - 2 {
        let r = c.lower.s[i].exp();
        let (mut best, mut arg, mut worst_unc) = (0.0f64, 0usize, 0.0f64);
        for j in 0..cc - 3 {
            let t = c.lower.theta[j];
            let sub = c1.map(|g| g(t) * r).unwrap_or(0.0);
            let (vc, _) = mid(c, i, j);
            let (vm, _) = mid(m, 2 * i, 2 * j);
            let (vf, gap) = mid(f, 4 * i, 4 * j);
            let rf = (4.0 * vf - vm) / 3.0 - 1.0 - sub;
            let rm = (4.0 * vm - vc) / 3.0 - 1.0 - sub;
            if rf.abs() >= best {
                best = rf.abs();
                arg = j;
            }
            worst_unc = worst_unc.max(gap + (rf - rm).abs());
        }
        let x = c.domain.physical_point(r, c.lower.theta[arg])?;
        out.d.push(x.iter().map(|v| v * v).sum::<f64>().sqrt());
        out.r.push(r);
        out.error.push(best);
        out.gap.push(worst_unc);
        out.trusted.push(worst_unc < TRUST_FRACTION * best);
    }
    if !out.trusted.iter().any(|t| *t) {
        return Err(Error::Certification("no sample lies in the trusted region".into()));
    }
    Ok(out)
}

impl RatioProfile {
    /// Trusted samples with error above `floor`.
    pub fn trusted_samples(&self, floor: f64) -> Vec<(f64, f64)> {
        (0..self.d.len())
            .filter(|&i| self.trusted[i] && self.error[i] > floor)
            .map(|i| (self.d[i], self.error[i]))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("d,r,error,gap,trusted\n");
        for i in 0..self.d.len() {
            s.push_str(&format!(
                "{:.12e},{:.12e},{:.12e},{:.12e},{}\n",
                self.d[i], self.r[i], self.error[i], self.gap[i], self.trusted[i] as u8
            ));
        }
        s
    }
}

/// Largest `u(x)/(2u_δ)` over interior nodes, where `u_δ = (2/δ)^{(n−2)/2}` is
/// the ball solution at the center of a ball `B_δ(x)` inside the solve region.
/// Values at most one confirm the Keller–Osserman bound.
pub fn keller_osserman_ratio(sol: &MeridianSolution, domain: &MeridianDomain) -> Result<f64> {
    let k = kexp(domain.n);
    let mut worst = 0.0f64;
    for i in 1..sol.s.len() - 1 {
        let r = sol.s[i].exp();
        for j in 0..sol.cols() - 1 {
            let t = sol.theta[j];
            let gap = (domain.alpha - t).min(std::f64::consts::FRAC_PI_2);
            let delta = 0.5 * (r * gap.sin()).min(r - domain.r_in).min(domain.r_out - r);
            // T⁻¹ moves distances by at most its Lipschitz constant on the region
            let lip = 1.0 + 4.0 * lipschitz_defect(&domain.map, domain.r_out);
            let bound = 2.0 * (2.0 * lip / delta).powf(k);
            worst = worst.max(sol.u_at(i, j) / bound);
        }
    }
    Ok(worst)
}

fn lipschitz_defect(map: &DiffeoMap, r: f64) -> f64 {
    match map.kind {
        MapKind::Identity => 0.0,
        MapKind::Example1 { c } => c.abs() * r,
        MapKind::Ball { radius } => r / radius,
        MapKind::Example5 => r,
    }
}

/// Constants of the barrier construction.
#[derive(Debug, Clone, Serialize)]
pub struct IngredientBounds {
    /// `C₁` with `d²|∇²u_V| + d|∇u_V| ≤ C₁u_V` and `C₁⁻¹ ≤ d^{(n−2)/2}u_V`.
    pub c1: f64,
    /// `max d^{(n−2)/2}u_V`, to be compared with `2^{(n−2)/2}`.
    pub upper: f64,
    pub upper_ok: bool,
    pub samples: usize,
}

/// Distance from `y` at `(r, Θ)` to the boundary of the rotational cone.
pub fn cone_distance(alpha: f64, r: f64, t: f64) -> f64 {
    let g = alpha - t;
    if g >= std::f64::consts::FRAC_PI_2 {
        r
    } else {
        r * g.sin()
    }
}

fn barrier_thetas(profile: &RadialProfile) -> Vec<f64> {
    let last = profile.len() - 3;
    let stride = (last / 48).max(1);
    (0..=last).step_by(stride).map(|i| profile.theta[i]).collect()
}

/// Samples the gradient, Hessian and zeroth-order bounds of `u_V` on the unit
/// sphere (they are scale invariant).
pub fn ingredient_bounds(profile: &RadialProfile) -> Result<IngredientBounds> {
    let n = profile.n;
    let k = kexp(n);
    let mut c1 = 0.0f64;
    let mut upper = 0.0f64;
    let thetas = barrier_thetas(profile);
    for &t in &thetas {
        let mut y = vec![0.0; n];
        y[0] = t.sin();
        y[n - 1] = t.cos();
        let d = cone_distance(profile.alpha, 1.0, t);
        let (u, g, h) = profile.cartesian_jet(&y)?;
        c1 = c1.max((d * d * h.norm() + d * g.norm()) / u);
        let z = d.powf(k) * u;
        c1 = c1.max(1.0 / z);
        upper = upper.max(z);
    }
    let cap = 2f64.powf(k);
    Ok(IngredientBounds {
        c1,
        upper,
        upper_ok: upper <= cap * (1.0 + 1e-9),
        samples: thetas.len(),
    })
}

/// `β = 1 − 2/(n − 2)` for `n ≥ 4` and `0` for `n = 3`.
pub fn barrier_beta(n: usize) -> f64 {
    if n == 3 {
        0.0
    } else {
        1.0 - 2.0 / (n as f64 - 2.0)
    }
}

/// `C₃ = (4/(n(n+2)))(1 − (n−2)β/(n+2))⁻¹(2C₁ + n − 1)C₁^{4/(n−2)}`, so that `A = C₃B`.
pub fn barrier_c3(n: usize, c1: f64) -> f64 {
    let nf = n as f64;
    let beta = barrier_beta(n);
    4.0 / (nf * (nf + 2.0)) / (1.0 - (nf - 2.0) * beta / (nf + 2.0)) * (2.0 * c1 + nf - 1.0) * c1.powf(4.0 / (nf - 2.0))
}

fn power_jet(j: &ConeJet, p: f64) -> ConeJet {
    if p == 0.0 {
        return ConeJet::separable((1.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0));
    }
    let g = j.u.powf(p);
    let g1 = p * j.u.powf(p - 1.0);
    let g2 = p * (p - 1.0) * j.u.powf(p - 2.0);
    ConeJet {
        u: g,
        u_r: g1 * j.u_r,
        u_t: g1 * j.u_t,
        u_rr: g2 * j.u_r * j.u_r + g1 * j.u_rr,
        u_rt: g2 * j.u_r * j.u_t + g1 * j.u_rt,
        u_tt: g2 * j.u_t * j.u_t + g1 * j.u_tt,
        cot_u_t: g1 * j.cot_u_t,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BarrierReport {
    pub a: f64,
    pub b: f64,
    pub radius: f64,
    /// Largest `(ℒw − (n(n−2)/4)w^{(n+2)/(n−2)})/((n(n−2)/4)u_V^{(n+2)/(n−2)})`.
    pub max_residual: f64,
    pub samples: usize,
}

/// Samples the barrier inequality for `w = u_V + A u_V^β + B u_V r` on
/// `{radius/100 ≤ r ≤ radius}` with the operator pulled back through `map`.
pub fn barrier_certify(profile: &RadialProfile, map: &DiffeoMap, a: f64, b: f64, radius: f64) -> Result<BarrierReport> {
    if profile.kind != ProfileKind::Cap || map.n != profile.n {
        return Err(Error::invalid("barrier needs a cap profile of the map's dimension"));
    }
    if !(radius > 0.0 && radius <= 0.5 * map.validity_radius) {
        return Err(Error::invalid(format!("radius {radius} outside the map's validity region")));
    }
    let n = profile.n;
    let nf = n as f64;
    let p = (nf + 2.0) / (nf - 2.0);
    let coef = nf * (nf - 2.0) / 4.0;
    let beta = barrier_beta(n);
    let thetas = barrier_thetas(profile);
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0;
    for q in 0..12 {
        let r = radius * 10f64.powf(-2.0 * q as f64 / 11.0);
        for &t in &thetas {
            let uv = profile.cone_jet(r, t)?;
            let lin = ConeJet::separable((r, 1.0, 0.0), (1.0, 0.0, 0.0, 0.0)).mul(&uv);
            let w = uv.add(&power_jet(&uv, beta).scale(a)).add(&lin.scale(b));
            let mut y = vec![0.0; n];
            y[0] = r * t.sin();
            y[n - 1] = r * t.cos();
            let (wv, g, h) = cap_cartesian(&y, &w);
            let (am, bv) = map.pullback_coefficients(&y)?;
            let lw = am.component_mul(&h).sum() + bv.dot(&g);
            let scale = coef * uv.u.powf(p);
            worst = worst.max((lw - coef * wv.powf(p)) / scale);
            count += 1;
        }
    }
    Ok(BarrierReport {
        a,
        b,
        radius,
        max_residual: worst,
        samples: count,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BarrierSearch {
    pub ingredients: IngredientBounds,
    pub beta: f64,
    pub c3: f64,
    /// First certified pair, if any.
    pub found: Option<BarrierReport>,
    pub attempts: usize,
}

pub const BARRIER_B: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];
pub const BARRIER_HALVINGS: usize = 12;

/// Sweeps `B` over `{1, 10, 10², 10³}` and halves the radius from `0.1`
/// until the sampled residual is nonpositive.
pub fn barrier_search(profile: &RadialProfile, map: &DiffeoMap) -> Result<BarrierSearch> {
    let ingredients = ingredient_bounds(profile)?;
    let c3 = barrier_c3(profile.n, ingredients.c1);
    let mut attempts = 0;
    let mut radius = 0.1f64.min(0.5 * map.validity_radius);
    for _ in 0..BARRIER_HALVINGS {
        for &b in &BARRIER_B {
            attempts += 1;
            let rep = barrier_certify(profile, map, c3 * b, b, radius)?;
            if rep.max_residual <= 0.0 {
                return Ok(BarrierSearch {
                    ingredients,
                    beta: barrier_beta(profile.n),
                    c3,
                    found: Some(rep),
                    attempts,
                });
            }
        }
        radius *= 0.5;
    }
    Err(Error::Certification(format!(
        "no (B, radius) pair certified after {attempts} attempts"
    )))
}

/// Relative residual of `u ↦ ℒu − (n(n−2)/4)u^{(n+2)/(n−2)}` for `u = u_V` under `map`.
pub fn cone_residual(profile: &RadialProfile, map: &DiffeoMap, r: f64, t: f64) -> Result<f64> {
    let rep_map = map;
    let uv = profile.cone_jet(r, t)?;
    let n = profile.n;
    let mut y = vec![0.0; n];
    y[0] = r * t.sin();
    y[n - 1] = r * t.cos();
    let (u, g, h) = cap_cartesian(&y, &uv);
    let (a, b): (DMatrix<f64>, DVector<f64>) = rep_map.pullback_coefficients(&y)?;
    let nf = n as f64;
    let coef = nf * (nf - 2.0) / 4.0;
    let p = (nf + 2.0) / (nf - 2.0);
    Ok((a.component_mul(&h).sum() + b.dot(&g) - coef * u.powf(p)) / (coef * u.powf(p)))
}

/// `ω` interpolated in `Θ` on one radial grid line.
pub fn omega_line(sol: &MeridianSolution, i: usize, t: f64) -> f64 {
    let h = sol.theta[1] - sol.theta[0];
    let row = &sol.omega[i * sol.cols()..(i + 1) * sol.cols()];
    interp_uniform(row, h, t, true).0
}
