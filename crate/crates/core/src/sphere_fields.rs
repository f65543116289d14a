//! The `ρ`-form of the cone-section equation on domains of `S²`, in polar
//! coordinates `(Θ, φ)`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cone_profiles::RadialProfile;
use crate::error::{Error, Result, StageExt};
use crate::linalg::{Csr, Triplets};
use crate::newton::{newton, NewtonOptions, NonlinearSystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    /// `{Θ < α}`.
    Cap { alpha: f64 },
    /// `{0 < φ < α}`, bounded by two half great circles through the poles.
    Lune { alpha: f64 },
    /// Nodes of a full-sphere grid flagged inside.
    Mask {
        n_theta: usize,
        n_phi: usize,
        inside: Vec<bool>,
    },
}

/// A structured `(Θ, φ)` grid on a domain `Σ ⊂ S²`.
///
/// Node ids collapse all grid points at a pole to a single id.
#[derive(Debug, Clone)]
pub struct SphericalDomain {
    pub spec: DomainSpec,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub periodic: bool,
    pub h_theta: f64,
    pub h_phi: f64,
    /// `node[i][j]` is the id of grid point `(Θ_i, φ_j)`.
    node: Vec<Vec<usize>>,
    /// Per node: `(i, j)` of a representative grid point.
    pub coords: Vec<(usize, usize)>,
    /// Per node: whether the node is a Dirichlet (boundary or exterior) node.
    pub fixed: Vec<bool>,
    /// Per node: geodesic distance to `∂Σ`.
    pub distance: Vec<f64>,
    /// Per node: finite-volume cell area.
    pub area: Vec<f64>,
}

/// Values on the nodes of a `SphericalDomain`.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub values: Vec<f64>,
}

impl SphericalDomain {
    pub fn cap(alpha: f64, n_theta: usize, n_phi: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < PI) {
            return Err(Error::invalid(format!("cap angle {alpha} outside (0, π)")));
        }
        if n_theta < 4 || n_phi < 4 {
            return Err(Error::invalid("grid too small"));
        }
        let h = alpha / n_theta as f64;
        let theta: Vec<f64> = (0..=n_theta).map(|i| i as f64 * h).collect();
        let hp = 2.0 * PI / n_phi as f64;
        let phi: Vec<f64> = (0..n_phi).map(|j| j as f64 * hp).collect();
        Ok(Self::build(
            DomainSpec::Cap { alpha },
            theta,
            phi,
            true,
            |i, _| i == n_theta,
            |t, _| alpha - t,
        ))
    }

    pub fn lune(alpha: f64, n_theta: usize, n_phi: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < PI) {
            return Err(Error::invalid(format!("lune angle {alpha} outside (0, π)")));
        }
        if n_theta < 4 || n_phi < 4 {
            return Err(Error::invalid("grid too small"));
        }
        let h = PI / n_theta as f64;
        let theta: Vec<f64> = (0..=n_theta).map(|i| i as f64 * h).collect();
        let hp = alpha / n_phi as f64;
        let phi: Vec<f64> = (0..=n_phi).map(|j| j as f64 * hp).collect();
        Ok(Self::build(
            DomainSpec::Lune { alpha },
            theta,
            phi,
            false,
            |i, j| i == 0 || i == n_theta || j == 0 || j == n_phi,
            |t, p| (t.sin() * p.min(alpha - p).sin()).clamp(-1.0, 1.0).asin(),
        ))
    }

    /// A gridded domain on the full sphere; the distance field is computed by
    /// brute force against exterior nodes and connectivity is checked.
    pub fn mask(n_theta: usize, n_phi: usize, inside: Vec<bool>) -> Result<Self> {
        if inside.len() != (n_theta + 1) * n_phi {
            return Err(Error::invalid("mask size does not match the grid"));
        }
        let h = PI / n_theta as f64;
        let theta: Vec<f64> = (0..=n_theta).map(|i| i as f64 * h).collect();
        let hp = 2.0 * PI / n_phi as f64;
        let phi: Vec<f64> = (0..n_phi).map(|j| j as f64 * hp).collect();
        let ins = inside.clone();
        let is_in = move |i: usize, j: usize| ins[i * n_phi + j];
        let mut dom = Self::build(
            DomainSpec::Mask {
                n_theta,
                n_phi,
                inside,
            },
            theta,
            phi,
            true,
            |i, j| !is_in(i, j),
            |_, _| 0.0,
        );
        // pole nodes are inside only if every ring entry agrees
        let outside: Vec<[f64; 3]> = (0..dom.n_nodes())
            .filter(|&k| dom.fixed[k])
            .map(|k| dom.unit_vector(k))
            .collect();
        if outside.is_empty() {
            return Err(Error::domain("mask covers the whole sphere"));
        }
        for k in 0..dom.n_nodes() {
            dom.distance[k] = if dom.fixed[k] {
                0.0
            } else {
                let p = dom.unit_vector(k);
                outside
                    .iter()
                    .map(|q| (p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).clamp(-1.0, 1.0).acos())
                    .fold(f64::INFINITY, f64::min)
            };
        }
        if !dom.is_connected() {
            return Err(Error::domain("mask is not connected"));
        }
        Ok(dom)
    }

    fn build(
        spec: DomainSpec,
        theta: Vec<f64>,
        phi: Vec<f64>,
        periodic: bool,
        fixed_at: impl Fn(usize, usize) -> bool,
        dist: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let nt = theta.len();
        let np = phi.len();
        let h_theta = theta[1] - theta[0];
        let h_phi = if periodic { 2.0 * PI / np as f64 } else { phi[1] - phi[0] };
        let mut node = vec![vec![0usize; np]; nt];
        let mut coords = Vec::new();
        let mut fixed = Vec::new();
        let mut distance = Vec::new();
        let mut area = Vec::new();
        for i in 0..nt {
            let pole = periodic && (theta[i] == 0.0 || (theta[i] - PI).abs() < 1e-12);
            for j in 0..np {
                if pole && j > 0 {
                    node[i][j] = node[i][0];
                    continue;
                }
                node[i][j] = coords.len();
                coords.push((i, j));
                let fx = if pole {
                    (0..np).any(|jj| fixed_at(i, jj))
                } else {
                    fixed_at(i, j)
                };
                fixed.push(fx);
                distance.push(dist(theta[i], phi[j]).max(0.0));
                let t = theta[i];
                let h = h_theta;
                let a = if pole {
                    // volume that makes the center row the L'Hôpital form 4(ρ̄₁ − ρ₀)/h²
                    2.0 * PI * (0.5 * h).sin() * h / 4.0
                } else {
                    let lo = (t - 0.5 * h).max(0.0);
                    let hi = (t + 0.5 * h).min(PI);
                    (lo.cos() - hi.cos()) * h_phi
                };
                area.push(a);
            }
        }
        Self {
            spec,
            theta,
            phi,
            periodic,
            h_theta,
            h_phi,
            node,
            coords,
            fixed,
            distance,
            area,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn node_id(&self, i: usize, j: usize) -> usize {
        self.node[i][j]
    }

    pub fn is_pole(&self, k: usize) -> bool {
        let (i, _) = self.coords[k];
        self.periodic && (self.theta[i] == 0.0 || (self.theta[i] - PI).abs() < 1e-12)
    }

    pub fn unit_vector(&self, k: usize) -> [f64; 3] {
        let (i, j) = self.coords[k];
        let (t, p) = (self.theta[i], self.phi[j]);
        [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]
    }

    fn neighbors(&self, k: usize) -> Vec<usize> {
        let (i, j) = self.coords[k];
        let nt = self.theta.len();
        let np = self.phi.len();
        let mut out = Vec::new();
        if self.is_pole(k) {
            let ring = if i == 0 { 1 } else { nt - 2 };
            for jj in 0..np {
                out.push(self.node[ring][jj]);
            }
            return out;
        }
        if i > 0 {
            out.push(self.node[i - 1][j]);
        }
        if i + 1 < nt {
            out.push(self.node[i + 1][j]);
        }
        if self.periodic {
            out.push(self.node[i][(j + 1) % np]);
            out.push(self.node[i][(j + np - 1) % np]);
        } else {
            if j > 0 {
                out.push(self.node[i][j - 1]);
            }
            if j + 1 < np {
                out.push(self.node[i][j + 1]);
            }
        }
        out
    }

    /// Flood fill over free nodes.
    pub fn is_connected(&self) -> bool {
        let free: Vec<usize> = (0..self.n_nodes()).filter(|&k| !self.fixed[k]).collect();
        let Some(&start) = free.first() else {
            return false;
        };
        let mut seen = vec![false; self.n_nodes()];
        seen[start] = true;
        let mut q = VecDeque::from([start]);
        let mut count = 1;
        while let Some(k) = q.pop_front() {
            for m in self.neighbors(k) {
                if !self.fixed[m] && !seen[m] {
                    seen[m] = true;
                    count += 1;
                    q.push_back(m);
                }
            }
        }
        count == free.len()
    }

    pub fn unknowns(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&k| !self.fixed[k]).collect()
    }

    /// Linear stencils over node ids: the Laplace–Beltrami operator and the two
    /// orthonormal gradient components `(∂_Θ, sin⁻¹Θ ∂_φ)`.
    pub fn stencils(&self) -> Stencils {
        let nn = self.n_nodes();
        let mut lap = Triplets::new(nn, nn);
        let mut g1 = Triplets::new(nn, nn);
        let mut g2 = Triplets::new(nn, nn);
        let h = self.h_theta;
        let hp = self.h_phi;
        let nt = self.theta.len();
        let np = self.phi.len();
        for k in 0..nn {
            if self.fixed[k] {
                continue;
            }
            let (i, j) = self.coords[k];
            if self.is_pole(k) {
                let ring = if i == 0 { 1 } else { nt - 2 };
                let c = (0.5 * h).sin() * hp / h / self.area[k];
                let sign = if i == 0 { 1.0 } else { -1.0 };
                for jj in 0..np {
                    let m = self.node[ring][jj];
                    lap.push(k, m, c);
                    lap.push(k, k, -c);
                    // least-squares fit ρ(h, φ) − ρ₀ ≈ h(a cos φ + b sin φ)
                    let w = 2.0 / (np as f64 * h);
                    g1.push(k, m, sign * w * self.phi[jj].cos());
                    g2.push(k, m, w * self.phi[jj].sin());
                }
                continue;
            }
            let t = self.theta[i];
            let st = t.sin();
            let sp = (t + 0.5 * h).sin();
            let sm = (t - 0.5 * h).sin();
            let up = self.node[i + 1][j];
            let dn = self.node[i - 1][j];
            let a = self.area[k];
            lap.push(k, up, sp * hp / h / a);
            lap.push(k, dn, sm * hp / h / a);
            lap.push(k, k, -(sp + sm) * hp / h / a);
            g1.push(k, up, 0.5 / h);
            g1.push(k, dn, -0.5 / h);
            let (jl, jr) = if self.periodic {
                ((j + np - 1) % np, (j + 1) % np)
            } else {
                (j - 1, j + 1)
            };
            let l = self.node[i][jl];
            let r = self.node[i][jr];
            let cphi = h / (st * hp) / a;
            lap.push(k, l, cphi);
            lap.push(k, r, cphi);
            lap.push(k, k, -2.0 * cphi);
            g2.push(k, r, 0.5 / (hp * st));
            g2.push(k, l, -0.5 / (hp * st));
        }
        Stencils {
            lap: lap.to_csr(),
            grad: [g1.to_csr(), g2.to_csr()],
        }
    }

    /// Field of `f(Θ, φ)` at the nodes.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        ScalarField {
            values: self
                .coords
                .iter()
                .map(|&(i, j)| f(self.theta[i], self.phi[j]))
                .collect(),
        }
    }

    pub fn to_csv(&self, field: &ScalarField) -> String {
        let mut s = String::from("Theta,phi,value\n");
        for (i, row) in self.node.iter().enumerate() {
            for (j, &k) in row.iter().enumerate() {
                s.push_str(&format!(
                    "{:.12e},{:.12e},{:.12e}\n",
                    self.theta[i], self.phi[j], field.values[k]
                ));
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Stencils {
    pub lap: Csr,
    pub grad: [Csr; 2],
}

struct RhoSystem<'a> {
    st: &'a Stencils,
    unk: &'a [usize],
    nn: usize,
}

impl RhoSystem<'_> {
    fn full(&self, x: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.nn];
        for (a, &k) in self.unk.iter().enumerate() {
            r[k] = x[a];
        }
        r
    }
}

impl NonlinearSystem for RhoSystem<'_> {
    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let r = self.full(x);
        let lap = self.st.lap.matvec(&r);
        let g1 = self.st.grad[0].matvec(&r);
        let g2 = self.st.grad[1].matvec(&r);
        self.unk
            .iter()
            .map(|&k| r[k] * lap[k] - 1.5 * (g1[k] * g1[k] + g2[k] * g2[k]) + 0.5 * r[k] * r[k] + 1.5)
            .collect()
    }

    fn jacobian(&self, x: &[f64]) -> Csr {
        let r = self.full(x);
        let lap = self.st.lap.matvec(&r);
        let g1 = self.st.grad[0].matvec(&r);
        let g2 = self.st.grad[1].matvec(&r);
        let mut col = vec![usize::MAX; self.nn];
        for (a, &k) in self.unk.iter().enumerate() {
            col[k] = a;
        }
        let m = self.unk.len();
        let mut t = Triplets::with_capacity(m, m, 12 * m);
        for (a, &k) in self.unk.iter().enumerate() {
            t.push(a, a, lap[k] + r[k]);
            for (c, v) in self.st.lap.row(k) {
                if col[c] != usize::MAX {
                    t.push(a, col[c], r[k] * v);
                }
            }
            for (gi, g) in [(0usize, g1[k]), (1, g2[k])] {
                for (c, v) in self.st.grad[gi].row(k) {
                    if col[c] != usize::MAX {
                        t.push(a, col[c], -3.0 * g * v);
                    }
                }
            }
        }
        t.to_csr()
    }
}

#[derive(Debug, Clone)]
pub struct RhoSolution {
    pub rho: ScalarField,
    /// Back-substitution residual of `ξ = ρ^{-1/2}`, relative to the nonlinear term.
    pub residual: f64,
    pub newton_iterations: usize,
}

/// Solves `ρΔρ = (3/2)|∇ρ|² − ρ²/2 − 3/2` with `ρ = 0` on `∂Σ` (the `n = 3` case).
pub fn solve_rho_2d(domain: &SphericalDomain) -> Result<RhoSolution> {
    if !domain.is_connected() {
        return Err(Error::domain("domain is not connected"));
    }
    let st = domain.stencils();
    let unk = domain.unknowns();
    let sys = RhoSystem {
        st: &st,
        unk: &unk,
        nn: domain.n_nodes(),
    };
    let x0: Vec<f64> = unk.iter().map(|&k| domain.distance[k].min(0.5).max(1e-3)).collect();
    let opts = NewtonOptions {
        tol: 1e-10,
        max_iter: 100,
        floor: Some(1e-14),
        step_tol: 1e-13,
    };
    let rep = newton(&sys, x0, opts, "sphere ρ solve").stage("solve_rho_2d")?;
    let res = sys.residual(&rep.x);
    // ξ-residual = −½ρ^{-5/2}·(ρ-residual); normalized by (3/4)ξ⁵ = (3/4)ρ^{-5/2}
    let residual = res.iter().fold(0.0f64, |m, v| m.max(v.abs())) / 1.5;
    Ok(RhoSolution {
        rho: ScalarField {
            values: sys.full(&rep.x),
        },
        residual,
        newton_iterations: rep.iterations,
    })
}

/// `(c₃, c₄)` with `c₃ ≤ ρ/d_Σ ≤ c₄` over free nodes.
pub fn rho_bounds(domain: &SphericalDomain, rho: &ScalarField) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for k in domain.unknowns() {
        let q = rho.values[k] / domain.distance[k];
        lo = lo.min(q);
        hi = hi.max(q);
    }
    (lo, hi)
}

/// Fourier coefficients of one azimuthal mode, per `Θ` ring.
#[derive(Debug, Clone)]
pub struct ModeProfile {
    pub m: usize,
    pub theta: Vec<f64>,
    /// Coefficient of `cos mφ`.
    pub cos: Vec<f64>,
    /// Coefficient of `sin mφ`.
    pub sin: Vec<f64>,
}

/// Discrete Fourier decomposition in `φ` of a field on a cap grid.
pub fn azimuthal_modes(domain: &SphericalDomain, field: &ScalarField, m_max: usize) -> Result<Vec<ModeProfile>> {
    if !matches!(domain.spec, DomainSpec::Cap { .. }) {
        return Err(Error::invalid("azimuthal modes need a cap domain"));
    }
    let np = domain.phi.len();
    if 2 * m_max >= np {
        return Err(Error::invalid("m_max too large for the azimuthal resolution"));
    }
    let nt = domain.theta.len();
    Ok((0..=m_max)
        .map(|m| {
            let mut c = vec![0.0; nt];
            let mut s = vec![0.0; nt];
            for i in 0..nt {
                let (mut a, mut b) = (0.0, 0.0);
                for j in 0..np {
                    let v = field.values[domain.node_id(i, j)];
                    let p = m as f64 * domain.phi[j];
                    a += v * p.cos();
                    b += v * p.sin();
                }
                let norm = if m == 0 { 1.0 / np as f64 } else { 2.0 / np as f64 };
                c[i] = a * norm;
                s[i] = b * norm;
            }
            ModeProfile {
                m,
                theta: domain.theta.clone(),
                cos: c,
                sin: s,
            }
        })
        .collect())
}

/// Rebuilds a field from its modes.
pub fn reconstruct(domain: &SphericalDomain, modes: &[ModeProfile]) -> ScalarField {
    domain.sample_ij(|i, j| {
        modes
            .iter()
            .map(|md| {
                let p = md.m as f64 * domain.phi[j];
                md.cos[i] * p.cos() + md.sin[i] * p.sin()
            })
            .sum()
    })
}

impl SphericalDomain {
    fn sample_ij(&self, f: impl Fn(usize, usize) -> f64) -> ScalarField {
        ScalarField {
            values: self.coords.iter().map(|&(i, j)| f(i, j)).collect(),
        }
    }

    /// Values along the ring-`j` meridian, indexed by `Θ_i`.
    pub fn meridian(&self, field: &ScalarField, j: usize) -> Vec<f64> {
        (0..self.theta.len()).map(|i| field.values[self.node[i][j]]).collect()
    }
}

/// Largest deviation between a cap field and a rotational profile along every meridian.
pub fn compare_with_profile(domain: &SphericalDomain, rho: &ScalarField, profile: &RadialProfile) -> Result<f64> {
    let mut err = 0.0f64;
    for k in 0..domain.n_nodes() {
        let (i, _) = domain.coords[k];
        let t = domain.theta[i];
        let (p, _, _) = profile.interp(t.min(profile.alpha))?;
        err = err.max((rho.values[k] - p).abs());
    }
    Ok(err)
}

/// Largest deviation between a lune field and `sin Θ · ρ_wedge(φ)`.
pub fn compare_with_wedge(domain: &SphericalDomain, rho: &ScalarField, wedge: &RadialProfile) -> Result<f64> {
    if !matches!(domain.spec, DomainSpec::Lune { .. }) {
        return Err(Error::invalid("wedge comparison needs a lune"));
    }
    let mut err = 0.0f64;
    for k in 0..domain.n_nodes() {
        let (i, j) = domain.coords[k];
        let (pw, _, _) = wedge.interp(domain.phi[j].clamp(0.0, wedge.alpha))?;
        err = err.max((rho.values[k] - domain.theta[i].sin() * pw).abs());
    }
    Ok(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone_profiles::{solve_cap, solve_wedge};

    #[test]
    fn hemisphere_is_cosine() {
        let d = SphericalDomain::cap(PI / 2.0, 256, 16).unwrap();
        let s = solve_rho_2d(&d).unwrap();
        let exact = d.sample(|t, _| t.cos());
        let err = s
            .rho
            .values
            .iter()
            .zip(&exact.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
        assert!(s.residual < 1e-6);
    }

    #[test]
    fn cap_pi3_matches_profile() {
        let d = SphericalDomain::cap(PI / 3.0, 256, 16).unwrap();
        let s = solve_rho_2d(&d).unwrap();
        let p = solve_cap(3, PI / 3.0, 128).unwrap();
        assert!(compare_with_profile(&d, &s.rho, &p).unwrap() < 1e-5);
    }

    #[test]
    fn lune_matches_wedge_product() {
        let alpha = 2.0 * PI / 3.0;
        let d = SphericalDomain::lune(alpha, 96, 96).unwrap();
        let s = solve_rho_2d(&d).unwrap();
        let w = solve_wedge(alpha, 96).unwrap();
        let err = compare_with_wedge(&d, &s.rho, &w).unwrap();
        assert!(err < 1e-3, "{err}");
        let (c3, c4) = rho_bounds(&d, &s.rho);
        assert!(c3 > 0.0 && c4.is_finite());
    }

    #[test]
    fn modes_of_simple_fields() {
        let d = SphericalDomain::cap(1.0, 16, 16).unwrap();
        let f = d.sample(|_, _| 2.5);
        let m = azimuthal_modes(&d, &f, 3).unwrap();
        assert!(m[0].cos.iter().all(|v| (v - 2.5).abs() < 1e-14));
        assert!(m[1..].iter().all(|md| md.cos.iter().chain(&md.sin).all(|v| v.abs() < 1e-14)));
        let g = d.sample(|t, p| t.sin() * p.cos());
        let m = azimuthal_modes(&d, &g, 3).unwrap();
        for md in &m {
            let mx = md.cos.iter().chain(&md.sin).fold(0.0f64, |a, v| a.max(v.abs()));
            assert_eq!(mx > 1e-12, md.m == 1);
        }
        let back = reconstruct(&d, &m);
        let err = back.values.iter().zip(&g.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);
        assert!(azimuthal_modes(&SphericalDomain::lune(1.0, 8, 8).unwrap(), &g, 1).is_err());
    }

    #[test]
    fn mask_cap_matches_cap_kind() {
        let (nt, np) = (64, 32);
        let alpha = 1.0;
        let inside: Vec<bool> = (0..=nt)
            .flat_map(|i| (0..np).map(move |_| (i as f64 * PI / nt as f64) < alpha - 1e-12))
            .collect();
        let d = SphericalDomain::mask(nt, np, inside).unwrap();
        assert!(d.is_connected());
        let s = solve_rho_2d(&d).unwrap();
        let p = solve_cap(3, alpha, 64).unwrap();
        let (i, j) = (5, 3);
        let k = d.node_id(i, j);
        let (pv, _, _) = p.interp(d.theta[i]).unwrap();
        // boundary sits up to one cell off the true circle
        assert!((s.rho.values[k] - pv).abs() < 0.05);
    }

    #[test]
    fn disconnected_mask_is_rejected() {
        let (nt, np) = (16, 16);
        let inside: Vec<bool> = (0..=nt)
            .flat_map(|i| (0..np).map(move |j| (i == 4 || i == 12) && j > 2 && j < 8))
            .collect();
        assert!(matches!(SphericalDomain::mask(nt, np, inside), Err(Error::Domain(_))));
    }
}
