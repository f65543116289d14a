//! Domain descriptions, local diffeomorphisms onto tangent cones, and checks
//! of how derivatives and norms transform under them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Second derivatives of a vector map: `h[i][(j, k)] = ∂²T^i/∂x_j∂x_k`.
pub type Hessian = Vec<DMatrix<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regularity {
    C2,
    C3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapKind {
    Identity,
    /// `S₀y = y + c|y|²e_n`, with `T₀ = S₀⁻¹` given in closed form.
    Example1 { c: f64 },
    /// The explicit quadratic map with `a_{ij,k} = 2δ_{ij}` at the origin.
    Example5,
    /// Möbius map sending the ball `B_R(R e_n)` onto the upper half-space.
    Ball { radius: f64 },
}

/// A local diffeomorphism `T` with `T(0) = 0` and `∇T(0) = id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffeoMap {
    pub n: usize,
    pub kind: MapKind,
    pub regularity: Regularity,
    /// Radius inside which forward and inverse evaluation are trusted.
    pub validity_radius: f64,
}

impl DiffeoMap {
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            kind: MapKind::Identity,
            regularity: Regularity::C3,
            validity_radius: f64::INFINITY,
        }
    }

    pub fn mobius_ball(n: usize, radius: f64) -> Result<Self> {
        if n < 2 || !(radius > 0.0) {
            return Err(Error::invalid(format!("ball map needs n >= 2 and R > 0, got n={n}, R={radius}")));
        }
        Ok(Self {
            n,
            kind: MapKind::Ball { radius },
            regularity: Regularity::C3,
            validity_radius: 2.0 * radius,
        })
    }

    /// Parses the CLI names `identity`, `example1:<c>`, `example5`, `ball:<R>`.
    pub fn from_name(name: &str, n: usize) -> Result<Self> {
        let mut parts = name.splitn(2, ':');
        let head = parts.next().unwrap_or("");
        let arg = parts.next();
        let num = |a: Option<&str>| -> Result<f64> {
            a.ok_or_else(|| Error::invalid(format!("map '{name}' needs a parameter")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("map '{name}': {e}")))
        };
        match head {
            "identity" | "id" => Ok(Self::identity(n)),
            "example1" => example1_map(num(arg)?, n),
            "example5" => example5_map(n),
            "ball" => Self::mobius_ball(n, num(arg)?),
            _ => Err(Error::invalid(format!("unknown map '{name}'"))),
        }
    }

    pub fn name(&self) -> String {
        match self.kind {
            MapKind::Identity => "identity".into(),
            MapKind::Example1 { c } => format!("example1:{c}"),
            MapKind::Example5 => "example5".into(),
            MapKind::Ball { radius } => format!("ball:{radius}"),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::invalid(format!(
                "point has dimension {}, map has {}",
                x.len(),
                self.n
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let n = self.n;
        match self.kind {
            MapKind::Identity => Ok(x.to_vec()),
            MapKind::Example1 { c } => {
                if c == 0.0 {
                    return Ok(x.to_vec());
                }
                let d = ex1_disc(c, x)?;
                let mut y = x.to_vec();
                y[n - 1] = (d.sqrt() - 1.0) / (2.0 * c);
                Ok(y)
            }
            MapKind::Example5 => {
                let s: f64 = x.iter().sum();
                let q: f64 = x.iter().map(|v| v * v).sum();
                Ok(x.iter().map(|&xi| xi + xi * s - 0.5 * q).collect())
            }
            MapKind::Ball { radius } => Ok(mobius(x, 1.0 / (2.0 * radius))),
        }
    }

    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(y)?;
        let n = self.n;
        match self.kind {
            MapKind::Identity => Ok(y.to_vec()),
            MapKind::Example1 { c } => {
                let q: f64 = y.iter().map(|v| v * v).sum();
                let mut x = y.to_vec();
                x[n - 1] += c * q;
                Ok(x)
            }
            MapKind::Example5 => self.newton_inverse(y),
            MapKind::Ball { radius } => Ok(mobius(y, -1.0 / (2.0 * radius))),
        }
    }

    fn newton_inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        let yn = DVector::from_column_slice(y);
        let mut x = yn.clone();
        for _ in 0..60 {
            let fx = DVector::from_vec(self.forward(x.as_slice())?) - &yn;
            if fx.amax() < 1e-15 * (1.0 + yn.amax()) {
                return Ok(x.as_slice().to_vec());
            }
            let j = self.jacobian(x.as_slice())?;
            let dx = j
                .lu()
                .solve(&fx)
                .ok_or_else(|| Error::domain("singular jacobian during inversion"))?;
            x -= dx;
        }
        let fx = DVector::from_vec(self.forward(x.as_slice())?) - &yn;
        if fx.amax() < 1e-13 * (1.0 + yn.amax()) {
            Ok(x.as_slice().to_vec())
        } else {
            Err(Error::domain(format!(
                "inverse did not converge at |y| = {:.3e}",
                yn.norm()
            )))
        }
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let n = self.n;
        match self.kind {
            MapKind::Identity => Ok(DMatrix::identity(n, n)),
            MapKind::Example1 { c } => {
                let mut j = DMatrix::identity(n, n);
                if c == 0.0 {
                    return Ok(j);
                }
                let d = ex1_disc(c, x)?;
                let s = d.sqrt();
                for k in 0..n - 1 {
                    j[(n - 1, k)] = -2.0 * c * x[k] / s;
                }
                j[(n - 1, n - 1)] = 1.0 / s;
                Ok(j)
            }
            MapKind::Example5 => {
                let s: f64 = x.iter().sum();
                Ok(DMatrix::from_fn(n, n, |i, j| {
                    (if i == j { 1.0 + s } else { 0.0 }) + x[i] - x[j]
                }))
            }
            MapKind::Ball { radius } => Ok(mobius_jet(x, 1.0 / (2.0 * radius)).1),
        }
    }

    pub fn hessian(&self, x: &[f64]) -> Result<Hessian> {
        self.check_dim(x)?;
        let n = self.n;
        let zero = || vec![DMatrix::zeros(n, n); n];
        match self.kind {
            MapKind::Identity => Ok(zero()),
            MapKind::Example1 { c } => {
                let mut h = zero();
                if c == 0.0 {
                    return Ok(h);
                }
                let d = ex1_disc(c, x)?;
                let d12 = d.powf(-0.5);
                let d32 = d.powf(-1.5);
                let m = &mut h[n - 1];
                for j in 0..n {
                    for k in 0..n {
                        let v = match (j == n - 1, k == n - 1) {
                            (true, true) => -2.0 * c * d32,
                            (true, false) => 4.0 * c * c * x[k] * d32,
                            (false, true) => 4.0 * c * c * x[j] * d32,
                            (false, false) => {
                                let dl = if j == k { 1.0 } else { 0.0 };
                                -2.0 * c * dl * d12 - 8.0 * c.powi(3) * x[j] * x[k] * d32
                            }
                        };
                        m[(j, k)] = v;
                    }
                }
                Ok(h)
            }
            MapKind::Example5 => {
                let dl = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                Ok((0..n)
                    .map(|i| DMatrix::from_fn(n, n, |j, k| dl(i, j) + dl(i, k) - dl(j, k)))
                    .collect())
            }
            MapKind::Ball { radius } => Ok(mobius_jet(x, 1.0 / (2.0 * radius)).2),
        }
    }

    /// Euclidean Laplacian of each component, `ΔT^i`.
    pub fn laplacian(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.hessian(x)?.iter().map(|m| m.trace()).collect())
    }

    /// Coefficients of the pulled-back Laplacian in the cone frame:
    /// `a = ∇T ∇Tᵀ` and `b_i = ΔT^i`, both evaluated at `x = S(y)`.
    pub fn pullback_coefficients(&self, y: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let x = self.inverse(y)?;
        let j = self.jacobian(&x)?;
        let a = &j * j.transpose();
        let b = DVector::from_vec(self.laplacian(&x)?);
        Ok((a, b))
    }

    /// `a_{ij,k} = T^i_{jk} + T^j_{ik}` and `b_{i,0} = ΔT^i` at the origin.
    pub fn taylor_coefficients(&self) -> Result<(Vec<DMatrix<f64>>, DVector<f64>)> {
        let n = self.n;
        let zero = vec![0.0; n];
        let h = self.hessian(&zero)?;
        let a: Vec<DMatrix<f64>> = (0..n)
            .map(|k| DMatrix::from_fn(n, n, |i, j| h[i][(j, k)] + h[j][(i, k)]))
            .collect();
        let b = DVector::from_iterator(n, h.iter().map(|m| m.trace()));
        Ok((a, b))
    }

    /// Largest Frobenius norm of `∇²T` sampled on the segment `[0, x]`.
    pub fn c2_norm_on_segment(&self, x: &[f64], samples: usize) -> Result<f64> {
        let mut m = 0.0f64;
        for s in 0..=samples {
            let t = s as f64 / samples as f64;
            let p: Vec<f64> = x.iter().map(|v| v * t).collect();
            let h = self.hessian(&p)?;
            let f: f64 = h.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt();
            m = m.max(f);
        }
        Ok(m)
    }
}

fn ex1_disc(c: f64, x: &[f64]) -> Result<f64> {
    let n = x.len();
    let q: f64 = x[..n - 1].iter().map(|v| v * v).sum();
    let d = 1.0 + 4.0 * c * (x[n - 1] - c * q);
    if d <= 0.0 {
        return Err(Error::domain(format!(
            "square-root argument {d:.3e} is nonpositive"
        )));
    }
    Ok(d)
}

fn mobius(x: &[f64], beta: f64) -> Vec<f64> {
    let n = x.len();
    let q: f64 = x.iter().map(|v| v * v).sum();
    let den = 1.0 - 2.0 * beta * x[n - 1] + beta * beta * q;
    let mut y: Vec<f64> = x.iter().map(|v| v / den).collect();
    y[n - 1] -= beta * q / den;
    y
}

fn mobius_jet(x: &[f64], beta: f64) -> (Vec<f64>, DMatrix<f64>, Hessian) {
    let n = x.len();
    let t = mobius(x, beta);
    let q: f64 = x.iter().map(|v| v * v).sum();
    let den = 1.0 - 2.0 * beta * x[n - 1] + beta * beta * q;
    let b = |i: usize| if i == n - 1 { beta } else { 0.0 };
    let dden: Vec<f64> = (0..n).map(|j| -2.0 * b(j) + 2.0 * beta * beta * x[j]).collect();
    let dl = |a: usize, c: usize| if a == c { 1.0 } else { 0.0 };
    let jac = DMatrix::from_fn(n, n, |i, j| (dl(i, j) - 2.0 * b(i) * x[j] - t[i] * dden[j]) / den);
    let hess = (0..n)
        .map(|i| {
            DMatrix::from_fn(n, n, |j, k| {
                (-2.0 * b(i) * dl(j, k)
                    - jac[(i, k)] * dden[j]
                    - jac[(i, j)] * dden[k]
                    - 2.0 * t[i] * beta * beta * dl(j, k))
                    / den
            })
        })
        .collect();
    (t, jac, hess)
}

/// `T₀ = S₀⁻¹` for `S₀y = y + c|y|²e_n`.
pub fn example1_map(c: f64, n: usize) -> Result<DiffeoMap> {
    if n < 2 {
        return Err(Error::invalid("dimension must be at least 2"));
    }
    if !(c.abs() < 0.25) {
        return Err(Error::invalid(format!("|c| must be below 1/4, got {c}")));
    }
    let validity_radius = if c == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (8.0 * c.abs())
    };
    Ok(DiffeoMap {
        n,
        kind: MapKind::Example1 { c },
        regularity: Regularity::C3,
        validity_radius,
    })
}

/// The quadratic map `T^i(x) = x_i + x_i Σx_k − ½|x|²`; its validity radius is
/// the largest `r` with `σ_min(∇T) ≥ 1/2` along every coordinate segment of length `r`.
pub fn example5_map(n: usize) -> Result<DiffeoMap> {
    if n < 3 {
        return Err(Error::invalid("example5 map needs n >= 3"));
    }
    let mut map = DiffeoMap {
        n,
        kind: MapKind::Example5,
        regularity: Regularity::C3,
        validity_radius: f64::INFINITY,
    };
    map.validity_radius = jacobian_radius(&map, 0.5)?;
    Ok(map)
}

fn min_singular(m: DMatrix<f64>) -> f64 {
    m.singular_values().min()
}

fn jacobian_radius(map: &DiffeoMap, threshold: f64) -> Result<f64> {
    let n = map.n;
    let ok = |r: f64| -> Result<bool> {
        for k in 0..n {
            for sign in [1.0, -1.0] {
                for s in 1..=32 {
                    let mut x = vec![0.0; n];
                    x[k] = sign * r * s as f64 / 32.0;
                    if min_singular(map.jacobian(&x)?) < threshold {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while ok(hi)? {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Ok(f64::INFINITY);
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeKind {
    Wedge,
    Rotational,
    HalfSpace,
}

/// The tangent cone `V = {rθ : r > 0, θ ∈ Σ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeDescription {
    pub n: usize,
    pub kind: ConeKind,
    /// Opening angle; for rotational cones the polar angle of the boundary.
    pub alpha: f64,
    pub axis: Vec<f64>,
}

impl ConeDescription {
    pub fn new(n: usize, kind: ConeKind, alpha: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("dimension must be at least 2"));
        }
        let alpha = if kind == ConeKind::HalfSpace {
            std::f64::consts::FRAC_PI_2
        } else {
            alpha
        };
        if !(alpha > 0.0 && alpha < std::f64::consts::PI) {
            return Err(Error::invalid(format!("opening angle {alpha} outside (0, π)")));
        }
        let mut axis = vec![0.0; n];
        axis[n - 1] = 1.0;
        Ok(Self { n, kind, alpha, axis })
    }

    /// Polar angle measured from the axis.
    pub fn polar_angle(&self, y: &[f64]) -> f64 {
        let r: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c: f64 = y.iter().zip(&self.axis).map(|(a, b)| a * b).sum();
        (c / r).clamp(-1.0, 1.0).acos()
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        match self.kind {
            ConeKind::Wedge => {
                let th = y[1].atan2(y[0]);
                th > 0.0 && th < self.alpha
            }
            _ => self.polar_angle(y) < self.alpha,
        }
    }
}

/// A `C²` test function on the cone side with analytic derivatives.
pub trait TestFunction {
    fn gradient(&self, y: &[f64]) -> DVector<f64>;
    fn hessian(&self, y: &[f64]) -> DMatrix<f64>;
    fn value(&self, y: &[f64]) -> f64;
}

/// `f(y) = |y|²`.
pub struct SquaredNorm;

impl TestFunction for SquaredNorm {
    fn value(&self, y: &[f64]) -> f64 {
        y.iter().map(|v| v * v).sum()
    }
    fn gradient(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(y.len(), y.iter().map(|v| 2.0 * v))
    }
    fn hessian(&self, y: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(y.len(), y.len()) * 2.0
    }
}

/// `f(y) = c·y`.
pub struct Linear(pub Vec<f64>);

impl TestFunction for Linear {
    fn value(&self, y: &[f64]) -> f64 {
        self.0.iter().zip(y).map(|(a, b)| a * b).sum()
    }
    fn gradient(&self, _y: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
    fn hessian(&self, y: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(y.len(), y.len())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PushforwardReport {
    /// `max_i |∂_{x_i}(f∘T)(x) − (∂_{y_i}f)(Tx)|`.
    pub first_discrepancy: f64,
    pub first_bound: f64,
    /// `max_{ij} |∂²_{x_i x_j}(f∘T)(x) − (∂²_{y_i y_j}f)(Tx)|`.
    pub second_discrepancy: f64,
    pub second_bound: f64,
    /// Per-component discrepancies of the first derivatives.
    pub first_components: Vec<f64>,
    pub c0_first: f64,
    pub c0_second: f64,
    pub satisfied: bool,
}

/// Compares derivatives of `f∘T` with those of `f` at `Tx`, with constants
/// built from the sampled `C²`-norm of `T` along `[0, x]`.
pub fn pushforward_error_check(
    map: &DiffeoMap,
    f: &dyn TestFunction,
    x: &[f64],
) -> Result<PushforwardReport> {
    let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(nx < 0.5 * map.validity_radius) {
        return Err(Error::invalid(format!(
            "|x| = {nx:.3e} not below half the validity radius {:.3e}",
            map.validity_radius
        )));
    }
    let n = map.n;
    let y = map.forward(x)?;
    let j = map.jacobian(x)?;
    let h = map.hessian(x)?;
    let g = f.gradient(&y);
    let hf = f.hessian(&y);
    // chain rule: ∂_i(f∘T) = f_k T^k_i ; ∂_ij(f∘T) = f_kl T^k_i T^l_j + f_k T^k_ij
    let first = j.transpose() * &g;
    let mut second = j.transpose() * &hf * &j;
    for k in 0..n {
        second += &h[k] * g[k];
    }
    let first_components: Vec<f64> = (0..n).map(|i| (first[i] - g[i]).abs()).collect();
    let first_discrepancy = first_components.iter().cloned().fold(0.0, f64::max);
    let second_discrepancy = (second - &hf).amax();
    let slack = 1.0 + 1e-9;
    let m = map.c2_norm_on_segment(x, 64)?;
    let c0_first = m * slack;
    let c0_second = m * (2.0 + m * nx) * slack;
    let first_bound = c0_first * g.norm() * nx;
    let second_bound = c0_second * (g.norm() + nx * hf.norm());
    let tiny = 1e-14 * (1.0 + g.norm() + hf.norm());
    Ok(PushforwardReport {
        first_discrepancy,
        first_bound,
        second_discrepancy,
        second_bound,
        first_components,
        c0_first,
        c0_second,
        satisfied: first_discrepancy <= first_bound + tiny
            && second_discrepancy <= second_bound + tiny,
    })
}

/// `sup | |Tx| − |x| | / |x|²` over the samples.
pub fn norm_vs_distance_check(map: &DiffeoMap, samples: &[Vec<f64>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("empty sample list"));
    }
    let mut q = 0.0f64;
    for x in samples {
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 {
            continue;
        }
        if nx >= map.validity_radius {
            return Err(Error::invalid(format!(
                "sample with |x| = {nx:.3e} outside the validity radius"
            )));
        }
        let y = map.forward(x)?;
        let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        q = q.max((ny - nx).abs() / (nx * nx));
    }
    Ok(q)
}
