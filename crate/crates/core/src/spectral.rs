//! The singular operator `L₁ = Δ_θ − κ/ρ²`, `κ = n(n+2)/4`: eigenpairs, the
//! growth rate `μ₁`, resolvent solves and boundary decay.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::cone_profiles::{CapLaplacian, ProfileKind, RadialProfile};
use crate::error::{Error, Result};
use crate::linalg::{Csr, SparseLu, Triplets};
use crate::sphere_fields::{ScalarField, SphericalDomain};

/// `|S^k|`.
pub fn sphere_area(k: usize) -> f64 {
    use std::f64::consts::PI;
    match k {
        0 => 2.0,
        1 => 2.0 * PI,
        _ => 2.0 * PI / (k as f64 - 1.0) * sphere_area(k - 2),
    }
}

/// Discretized `L₁` (plus the azimuthal term `−m(m+n−3)/sin²θ` for a cap mode).
#[derive(Debug, Clone)]
pub struct SingularOperator {
    pub n: usize,
    pub kappa: f64,
    /// Azimuthal mode for cap profiles.
    pub mode: Option<usize>,
    pub n_full: usize,
    pub unknowns: Vec<usize>,
    /// `ρ` on all nodes.
    pub rho: Vec<f64>,
    /// `L²(Σ)` quadrature weights on all nodes.
    pub weight: Vec<f64>,
    lap: Csr,
    potential: Vec<f64>,
    grad: Vec<Csr>,
    second: Csr,
}

impl SingularOperator {
    /// One azimuthal mode `φ(θ)·Y_m` on a rotational cap. Profiles are
    /// normalized with the rotationally symmetric measure for every `m`.
    pub fn from_cap_profile(profile: &RadialProfile, m: usize) -> Result<Self> {
        if profile.kind != ProfileKind::Cap {
            return Err(Error::invalid("cap eigenproblems need a cap profile"));
        }
        let n = profile.n;
        let big_n = profile.len() - 1;
        let cl = CapLaplacian::new(n, profile.alpha, big_n);
        let h = cl.h;
        let mut lap = Triplets::with_capacity(big_n + 1, big_n + 1, 3 * big_n);
        let mut d1 = Triplets::new(big_n + 1, big_n + 1);
        let mut d2 = Triplets::new(big_n + 1, big_n + 1);
        for i in 0..big_n {
            let (lo, d, up) = cl.row(i);
            if i > 0 {
                lap.push(i, i - 1, lo);
                d1.push(i, i - 1, -0.5 / h);
                d2.push(i, i - 1, 1.0 / (h * h));
            }
            lap.push(i, i, d);
            lap.push(i, i + 1, up);
            if i > 0 {
                d1.push(i, i + 1, 0.5 / h);
            }
            d2.push(i, i, -2.0 / (h * h));
            d2.push(i, i + 1, if i == 0 { 2.0 } else { 1.0 } / (h * h));
        }
        let area = sphere_area(n - 2);
        let weight: Vec<f64> = cl.volume.iter().map(|v| v * area).collect();
        let mf = m as f64;
        let potential: Vec<f64> = profile
            .theta
            .iter()
            .map(|t| if m == 0 || *t == 0.0 { 0.0 } else { mf * (mf + n as f64 - 3.0) / t.sin().powi(2) })
            .collect();
        let start = usize::from(m > 0);
        let unknowns: Vec<usize> = (start..big_n).collect();
        Self::assemble(n, Some(m), profile.rho.clone(), weight, lap.to_csr(), potential, unknowns, vec![d1.to_csr()], d2.to_csr())
    }

    /// `L₁` on a two-dimensional spherical domain (`n = 3`).
    pub fn from_sphere(domain: &SphericalDomain, rho: &ScalarField) -> Result<Self> {
        let st = domain.stencils();
        let nn = domain.n_nodes();
        let [g1, g2] = st.grad;
        Self::assemble(
            3,
            None,
            rho.values.clone(),
            domain.area.clone(),
            st.lap.clone(),
            vec![0.0; nn],
            domain.unknowns(),
            vec![g1, g2],
            st.lap,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        n: usize,
        mode: Option<usize>,
        rho: Vec<f64>,
        weight: Vec<f64>,
        lap: Csr,
        potential: Vec<f64>,
        unknowns: Vec<usize>,
        grad: Vec<Csr>,
        second: Csr,
    ) -> Result<Self> {
        if let Some(&k) = unknowns.iter().find(|&&k| !(rho[k] > 0.0 && rho[k].is_finite())) {
            return Err(Error::domain(format!("ρ = {} at interior node {k}", rho[k])));
        }
        if unknowns.is_empty() {
            return Err(Error::domain("no interior nodes"));
        }
        let nf = n as f64;
        Ok(Self {
            n,
            kappa: nf * (nf + 2.0) / 4.0,
            mode,
            n_full: rho.len(),
            unknowns,
            rho,
            weight,
            lap,
            potential,
            grad,
            second,
        })
    }

    fn column_map(&self) -> Vec<usize> {
        let mut col = vec![usize::MAX; self.n_full];
        for (a, &k) in self.unknowns.iter().enumerate() {
            col[k] = a;
        }
        col
    }

    /// `ρ²(−Δ + V) + κ − σρ²` on the unknowns.
    pub fn scaled_matrix(&self, sigma: f64) -> Csr {
        let col = self.column_map();
        let m = self.unknowns.len();
        let mut t = Triplets::with_capacity(m, m, 5 * m);
        for (a, &k) in self.unknowns.iter().enumerate() {
            let r2 = self.rho[k] * self.rho[k];
            for (c, v) in self.lap.row(k) {
                if col[c] != usize::MAX {
                    t.push(a, col[c], -r2 * v);
                }
            }
            t.push(a, a, self.kappa + r2 * (self.potential[k] - sigma));
        }
        t.to_csr()
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.unknowns.iter().map(|&k| full[k]).collect()
    }

    pub fn extend(&self, x: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_full];
        for (a, &k) in self.unknowns.iter().enumerate() {
            full[k] = x[a];
        }
        full
    }

    /// `L₁u` (with the mode term) at every unknown; zero elsewhere.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let lap = self.lap.matvec(u);
        let mut out = vec![0.0; self.n_full];
        for &k in &self.unknowns {
            let r2 = self.rho[k] * self.rho[k];
            out[k] = lap[k] - (self.kappa / r2 + self.potential[k]) * u[k];
        }
        out
    }

    /// `L²(Σ)` inner product of full-node fields.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.unknowns.iter().map(|&k| self.weight[k] * a[k] * b[k]).sum()
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.inner(a, a).sqrt()
    }

    /// Discrete Rayleigh quotient `(∫|∇φ|² + κφ²/ρ²)/∫φ²`.
    pub fn rayleigh(&self, phi: &[f64]) -> f64 {
        let l = self.apply(phi);
        -self.inner(phi, &l) / self.inner(phi, phi)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenPair {
    /// 1-based position in the computed spectrum.
    pub index: usize,
    pub lambda: f64,
    pub mode: Option<usize>,
    /// Eigenfunction on all nodes, zero on Dirichlet nodes.
    pub phi: Vec<f64>,
    /// `‖A'φ − λρ²φ‖_∞ / ‖A'φ‖_∞` for the scaled operator `A'`.
    pub residual: f64,
}

pub const EIGEN_TOL: f64 = 1e-8;
pub const EIGEN_MAX_ITER: usize = 500;

/// Lowest `k` eigenpairs of `−L₁φ = λφ` by shift-and-invert block iteration
/// at shift 0 with weighted orthogonalization and Rayleigh–Ritz.
pub fn eigen_solve(op: &SingularOperator, k: usize) -> Result<Vec<EigenPair>> {
    if k == 0 {
        return Err(Error::invalid("need at least one eigenpair"));
    }
    let m = op.unknowns.len();
    if k > m {
        return Err(Error::invalid("more eigenpairs requested than unknowns"));
    }
    let p = (k + 4).min(m);
    let a = op.scaled_matrix(0.0);
    let lu = a.lu()?;
    let r2: Vec<f64> = op.unknowns.iter().map(|&i| op.rho[i] * op.rho[i]).collect();
    let w: Vec<f64> = op.unknowns.iter().map(|&i| op.weight[i]).collect();
    let winner = |x: &[f64], y: &[f64]| x.iter().zip(y).zip(&w).map(|((a, b), c)| a * b * c).sum::<f64>();

    let mut x: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            (0..m)
                .map(|i| {
                    let h = ((i as u64).wrapping_mul(2654435761) ^ (j as u64).wrapping_mul(40503)) % 1009;
                    if j == 0 { 1.0 } else { h as f64 / 1009.0 - 0.5 }
                })
                .collect()
        })
        .collect();
    let mut theta = vec![0.0; p];
    let mut res = vec![f64::INFINITY; p];
    for _ in 0..EIGEN_MAX_ITER {
        let mut y: Vec<Vec<f64>> = Vec::with_capacity(p);
        for col in &x {
            let rhs: Vec<f64> = col.iter().zip(&r2).map(|(v, r)| v * r).collect();
            y.push(lu.solve(&rhs)?);
        }
        // weighted Gram–Schmidt, twice
        for _ in 0..2 {
            for j in 0..p {
                for i in 0..j {
                    let c = winner(&y[j], &y[i]);
                    let yi = y[i].clone();
                    for (v, u) in y[j].iter_mut().zip(&yi) {
                        *v -= c * u;
                    }
                }
                let nrm = winner(&y[j], &y[j]).sqrt();
                if !(nrm > 0.0) {
                    return Err(Error::NoConvergence {
                        stage: "eigen_solve",
                        iterations: 0,
                        residual: f64::NAN,
                    });
                }
                y[j].iter_mut().for_each(|v| *v /= nrm);
            }
        }
        let z: Vec<Vec<f64>> = y
            .iter()
            .map(|col| a.matvec(col).iter().zip(&r2).map(|(v, r)| v / r).collect())
            .collect();
        let mut hm = DMatrix::<f64>::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                hm[(i, j)] = winner(&y[i], &z[j]);
            }
        }
        let hs = (&hm + hm.transpose()) * 0.5;
        let eig = SymmetricEigen::new(hs);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let mut nx = vec![vec![0.0; m]; p];
        let mut nz = vec![vec![0.0; m]; p];
        for (jj, &j) in order.iter().enumerate() {
            theta[jj] = eig.eigenvalues[j];
            for q in 0..p {
                let c = eig.eigenvectors[(q, j)];
                for i in 0..m {
                    nx[jj][i] += c * y[q][i];
                    nz[jj][i] += c * z[q][i];
                }
            }
        }
        for j in 0..p {
            let d: Vec<f64> = nz[j].iter().zip(&nx[j]).map(|(a, b)| a - theta[j] * b).collect();
            res[j] = winner(&d, &d).sqrt() / theta[j].abs().max(1e-300);
        }
        x = nx;
        if res[..k].iter().all(|r| *r < EIGEN_TOL) {
            break;
        }
    }
    let worst = res[..k].iter().cloned().fold(0.0, f64::max);
    if !(worst < EIGEN_TOL) {
        return Err(Error::NoConvergence {
            stage: "eigen_solve",
            iterations: EIGEN_MAX_ITER,
            residual: worst,
        });
    }
    let mut pairs = Vec::with_capacity(k);
    for j in 0..k {
        let mut phi = op.extend(&x[j]);
        let nrm = op.norm(&phi);
        phi.iter_mut().for_each(|v| *v /= nrm);
        let sign = if j == 0 {
            phi.iter().sum::<f64>().signum()
        } else {
            let mx = phi.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            op.unknowns
                .iter()
                .map(|&i| phi[i])
                .find(|v| v.abs() > 1e-8 * mx)
                .map_or(1.0, f64::signum)
        };
        phi.iter_mut().for_each(|v| *v *= sign);
        let xr = op.restrict(&phi);
        let ax = a.matvec(&xr);
        let d = ax
            .iter()
            .zip(&xr)
            .zip(&r2)
            .fold(0.0f64, |s, ((av, xv), r)| s.max((av - theta[j] * r * xv).abs()));
        let scale = ax.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        pairs.push(EigenPair {
            index: j + 1,
            lambda: theta[j],
            mode: op.mode,
            phi,
            residual: d / scale,
        });
    }
    Ok(pairs)
}

/// `μ₁ = √(((n−2)/2)² + λ₁)`.
pub fn mu1(lambda1: f64, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::invalid("need n >= 3"));
    }
    if !(lambda1 > 0.0) || !lambda1.is_finite() {
        return Err(Error::invalid(format!("λ₁ = {lambda1} must be positive")));
    }
    let k = (n as f64 - 2.0) / 2.0;
    Ok((k * k + lambda1).sqrt())
}

#[derive(Debug, Clone)]
pub struct ResolventSolution {
    pub u: Vec<f64>,
    /// `⟨f, φᵢ⟩`.
    pub coefficients: Vec<f64>,
    /// `‖f − Π_k f‖ / (λ_k − λ)`, infinite when `λ ≥ λ_k`.
    pub tail: f64,
    /// `‖ρ²(L₁u + λu − f)‖_∞ / ‖ρ²f‖_∞`.
    pub residual: f64,
}

/// Solves `L₁u + λu = f` by eigenfunction expansion,
/// `u = Σ ⟨f,φᵢ⟩/(λ − λᵢ) φᵢ`.
pub fn resolvent_solve(op: &SingularOperator, lambda: f64, f: &[f64], basis: &[EigenPair]) -> Result<ResolventSolution> {
    if basis.is_empty() {
        return Err(Error::invalid("empty eigenbasis"));
    }
    if f.len() != op.n_full {
        return Err(Error::invalid("field size does not match the operator"));
    }
    if let Some(p) = basis.iter().find(|p| (p.lambda - lambda).abs() < 1e-8) {
        return Err(Error::invalid(format!("λ = {lambda} is within 1e-8 of eigenvalue λ_{}", p.index)));
    }
    let mut u = vec![0.0; op.n_full];
    let mut proj = vec![0.0; op.n_full];
    let mut coefficients = Vec::with_capacity(basis.len());
    for p in basis {
        let c = op.inner(f, &p.phi);
        coefficients.push(c);
        for i in 0..op.n_full {
            u[i] += c / (lambda - p.lambda) * p.phi[i];
            proj[i] += c * p.phi[i];
        }
    }
    let rest: Vec<f64> = f.iter().zip(&proj).map(|(a, b)| a - b).collect();
    let top = basis.iter().map(|p| p.lambda).fold(f64::NEG_INFINITY, f64::max);
    let tail = if lambda < top { op.norm(&rest) / (top - lambda) } else { f64::INFINITY };
    let residual = resolvent_residual(op, lambda, &u, f);
    Ok(ResolventSolution {
        u,
        coefficients,
        tail,
        residual,
    })
}

/// `‖ρ²(L₁u + λu − f)‖_∞ / ‖ρ²f‖_∞` over unknowns.
pub fn resolvent_residual(op: &SingularOperator, lambda: f64, u: &[f64], f: &[f64]) -> f64 {
    let l = op.apply(u);
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for &k in &op.unknowns {
        let r2 = op.rho[k] * op.rho[k];
        num = num.max((r2 * (l[k] + lambda * u[k] - f[k])).abs());
        den = den.max((r2 * f[k]).abs());
    }
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Solves `L₁u + λu = f` directly with a sparse factorization.
pub fn resolvent_direct(op: &SingularOperator, lambda: f64, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != op.n_full {
        return Err(Error::invalid("field size does not match the operator"));
    }
    let a = op.scaled_matrix(lambda);
    let rhs: Vec<f64> = op.unknowns.iter().map(|&k| -op.rho[k] * op.rho[k] * f[k]).collect();
    let x = SparseLu::new(&a)?.solve(&rhs)?;
    Ok(op.extend(&x))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayFit {
    /// Fitted exponent in `|φ| ≈ Cρ^ν`.
    pub nu: f64,
    pub constant: f64,
    /// Smallest `C` with `|φ| + ρ|∇φ| + ρ²|∇²φ| ≤ Cρ^{ν−ε}` on the fit band.
    pub envelope: f64,
    pub epsilon: f64,
    pub samples: usize,
}

/// Log–log fit of `|φ|` against `ρ` over the band `3h ≲ ρ ≤ 0.1 max ρ`,
/// using the per-bin maximum of `|φ|` so that nodal lines do not bias the fit.
pub fn decay_check(op: &SingularOperator, phi: &[f64]) -> Result<DecayFit> {
    let rmax = op.unknowns.iter().map(|&k| op.rho[k]).fold(0.0, f64::max);
    let rmin_grid = op.unknowns.iter().map(|&k| op.rho[k]).fold(f64::INFINITY, f64::min);
    let lo = 3.0 * rmin_grid;
    let hi = 0.1 * rmax;
    if !(hi > 2.0 * lo) {
        return Err(Error::invalid("too few near-boundary samples"));
    }
    let bins = 12;
    let mut best = vec![0.0f64; bins];
    let mut at = vec![0.0f64; bins];
    let (llo, lhi) = (lo.ln(), hi.ln());
    let mut count = 0;
    for &k in &op.unknowns {
        let r = op.rho[k];
        if r < lo || r > hi {
            continue;
        }
        count += 1;
        let b = (((r.ln() - llo) / (lhi - llo)) * bins as f64).floor().min(bins as f64 - 1.0) as usize;
        if phi[k].abs() > best[b] {
            best[b] = phi[k].abs();
            at[b] = r;
        }
    }
    let pts: Vec<(f64, f64)> = best
        .iter()
        .zip(&at)
        .filter(|(v, _)| **v > 0.0)
        .map(|(v, r)| (r.ln(), v.ln()))
        .collect();
    if pts.len() < 4 {
        return Err(Error::invalid("too few near-boundary samples"));
    }
    let (nu, lc) = linear_fit(&pts);
    let eps = 0.1;
    let grads: Vec<Vec<f64>> = op.grad.iter().map(|g| g.matvec(phi)).collect();
    let sec = op.second.matvec(phi);
    let mut envelope = 0.0f64;
    for &k in &op.unknowns {
        let r = op.rho[k];
        if r < lo || r > hi {
            continue;
        }
        let g = grads.iter().map(|v| v[k] * v[k]).sum::<f64>().sqrt();
        let e = phi[k].abs() + r * g + r * r * sec[k].abs();
        envelope = envelope.max(e / r.powf(nu - eps));
    }
    Ok(DecayFit {
        nu,
        constant: lc.exp(),
        envelope,
        epsilon: eps,
        samples: count,
    })
}

/// Least-squares line `y = a x + b`; returns `(a, b)`.
pub(crate) fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let a = sxy / sxx;
    (a, my - a * mx)
}

/// Cap eigenpairs for azimuthal mode `m`.
pub fn cap_eigenpairs(profile: &RadialProfile, m: usize, k: usize) -> Result<(SingularOperator, Vec<EigenPair>)> {
    let op = SingularOperator::from_cap_profile(profile, m)?;
    let pairs = eigen_solve(&op, k)?;
    Ok((op, pairs))
}

/// `λ₁` of a rotational cap (the `m = 0` ground state).
pub fn cap_lambda1(profile: &RadialProfile) -> Result<f64> {
    Ok(cap_eigenpairs(profile, 0, 1)?.1[0].lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone_profiles::solve_cap;
    use std::f64::consts::PI;

    fn hemisphere(n: usize, big_n: usize) -> RadialProfile {
        solve_cap(n, PI / 2.0, big_n).unwrap()
    }

    #[test]
    fn sphere_areas() {
        assert!((sphere_area(1) - 2.0 * PI).abs() < 1e-14);
        assert!((sphere_area(2) - 4.0 * PI).abs() < 1e-14);
        assert!((sphere_area(3) - 2.0 * PI * PI).abs() < 1e-13);
    }

    #[test]
    fn substitution_oracle_for_the_hemisphere() {
        // φ = cos^a Θ with a = (n+2)/2 solves φ'' + (n−2)cot φ' − κφ/cos² = −λφ
        for n in [3usize, 4, 5] {
            let nf = n as f64;
            let a = (nf + 2.0) / 2.0;
            let lam = (nf + 2.0) * (3.0 * nf - 2.0) / 4.0;
            for &t in &[0.2, 0.7, 1.3] {
                let c = f64::cos(t);
                let s = f64::sin(t);
                let phi = c.powf(a);
                let d1 = -a * c.powf(a - 1.0) * s;
                let d2 = a * (a - 1.0) * c.powf(a - 2.0) * s * s - a * c.powf(a);
                let lhs = d2 + (nf - 2.0) * c / s * d1 - nf * (nf + 2.0) / 4.0 / (c * c) * phi;
                assert!((lhs + lam * phi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hemisphere_ground_state() {
        for n in [3usize, 4] {
            let p = hemisphere(n, 256);
            let (op, pairs) = cap_eigenpairs(&p, 0, 3).unwrap();
            let nf = n as f64;
            let exact = (nf + 2.0) * (3.0 * nf - 2.0) / 4.0;
            assert!((pairs[0].lambda / exact - 1.0).abs() < 1e-3, "n={n} {}", pairs[0].lambda);
            assert!((mu1(pairs[0].lambda, n).unwrap() - nf).abs() < 1e-3 * nf);
            assert!(pairs[0].lambda < pairs[1].lambda && pairs[1].lambda < pairs[2].lambda);
            assert!(pairs.iter().all(|q| q.residual < 1e-6));
            assert!(op.unknowns.iter().all(|&k| pairs[0].phi[k] > 0.0));
            // shape cos^{(n+2)/2}
            let a = (nf + 2.0) / 2.0;
            let shape: Vec<f64> = p.theta.iter().map(|t| t.cos().max(0.0).powf(a)).collect();
            let s = op.norm(&shape);
            let err = pairs[0]
                .phi
                .iter()
                .zip(&shape)
                .map(|(u, v)| (u - v / s).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-3, "{err}");
            for i in 0..3 {
                for j in 0..3 {
                    let d = op.inner(&pairs[i].phi, &pairs[j].phi) - if i == j { 1.0 } else { 0.0 };
                    assert!(d.abs() < 1e-8);
                }
                assert!((op.rayleigh(&pairs[i].phi) / pairs[i].lambda - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn first_azimuthal_mode_has_regular_center() {
        let p = hemisphere(3, 256);
        let (_, pairs) = cap_eigenpairs(&p, 1, 1).unwrap();
        // cos^{3/2} Θ · sin Θ cos φ type mode; λ = 15.75 by the same substitution
        assert!((pairs[0].lambda - 15.75).abs() < 2e-2, "{}", pairs[0].lambda);
        assert_eq!(pairs[0].phi[0], 0.0);
    }

    #[test]
    fn wide_caps_have_lambda_above_three_quarters() {
        for a in [0.6, 0.75, 0.9] {
            let p = solve_cap(3, a * PI, 256).unwrap();
            let l = cap_lambda1(&p).unwrap();
            assert!(l > 0.75, "α={a}π λ₁={l}");
        }
    }

    #[test]
    fn mu1_identities() {
        assert!((mu1(8.75, 3).unwrap() - 3.0).abs() < 1e-15);
        assert!((mu1(0.75, 3).unwrap() - 1.0).abs() < 1e-15);
        assert!(mu1(0.0, 4).is_err());
        assert!(mu1(-1.0, 3).is_err());
        for &(l, n) in &[(2.3, 3usize), (17.0, 5)] {
            let m = mu1(l, n).unwrap();
            let k = (n as f64 - 2.0) / 2.0;
            assert!((m * m - k * k - l).abs() < 1e-13);
            let s = m - k;
            assert!((s * (s + n as f64 - 2.0) - l).abs() < 1e-12);
        }
    }

    #[test]
    fn resolvent_mode_identities() {
        let p = hemisphere(3, 256);
        let (op, pairs) = cap_eigenpairs(&p, 0, 10).unwrap();
        let f = pairs[0].phi.clone();
        let r = resolvent_solve(&op, 0.0, &f, &pairs).unwrap();
        for i in 0..op.n_full {
            assert!((r.u[i] + pairs[0].phi[i] / pairs[0].lambda).abs() < 1e-10);
        }
        let lam = 0.75;
        let f2: Vec<f64> = pairs[0].phi.iter().zip(&pairs[1].phi).map(|(a, b)| a + b).collect();
        let r2 = resolvent_solve(&op, lam, &f2, &pairs).unwrap();
        for i in 0..op.n_full {
            let want = pairs[0].phi[i] / (lam - pairs[0].lambda) + pairs[1].phi[i] / (lam - pairs[1].lambda);
            assert!((r2.u[i] - want).abs() < 1e-9);
        }
        assert!(r2.residual < 1e-5);
        assert!(r2.tail < 1e-6);
        assert!(resolvent_solve(&op, pairs[2].lambda, &f2, &pairs).is_err());
    }

    #[test]
    fn resolvent_matches_direct_solve() {
        let p = hemisphere(3, 256);
        let (op, pairs) = cap_eigenpairs(&p, 0, 10).unwrap();
        let f: Vec<f64> = p.theta.iter().map(|t| t.cos().max(0.0).powf(2.5) * t.cos()).collect();
        let r = resolvent_solve(&op, 0.75, &f, &pairs).unwrap();
        let d = resolvent_direct(&op, 0.75, &f).unwrap();
        let err = r.u.iter().zip(&d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "{err} tail {}", r.tail);
        assert!(resolvent_residual(&op, 0.75, &d, &f) < 1e-10);
    }

    #[test]
    fn decay_exponents() {
        let p = hemisphere(3, 512);
        let (op, pairs) = cap_eigenpairs(&p, 0, 4).unwrap();
        let fit = decay_check(&op, &pairs[0].phi).unwrap();
        assert!((fit.nu - 2.5).abs() < 0.05, "{}", fit.nu);
        assert!(fit.envelope.is_finite());
        let doubled: Vec<f64> = pairs[0].phi.iter().map(|v| 2.0 * v).collect();
        let fit2 = decay_check(&op, &doubled).unwrap();
        assert!((fit2.nu - fit.nu).abs() < 1e-12);
        for q in &pairs {
            assert!(decay_check(&op, &q.phi).unwrap().nu > 0.0);
        }
    }

    #[test]
    fn zero_rho_is_rejected() {
        let mut p = hemisphere(3, 64);
        p.rho[10] = 0.0;
        assert!(SingularOperator::from_cap_profile(&p, 0).is_err());
    }
}
