//! Damped Newton iteration with residual-decrease line search.

use crate::error::{Error, Result};
use crate::linalg::{norm_inf, Csr};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Lower bound applied to every unknown after each step.
    pub floor: Option<f64>,
    /// Relative step size below which the iteration is considered stagnant.
    pub step_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 100,
            floor: Some(1e-14),
            step_tol: 1e-13,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

pub trait NonlinearSystem {
    fn residual(&self, x: &[f64]) -> Vec<f64>;
    fn jacobian(&self, x: &[f64]) -> Csr;
}

pub fn newton<S: NonlinearSystem>(
    sys: &S,
    x0: Vec<f64>,
    opts: NewtonOptions,
    stage: &'static str,
) -> Result<NewtonReport> {
    let mut x = x0;
    let mut f = sys.residual(&x);
    let mut fn0 = norm_inf(&f);
    for it in 0..opts.max_iter {
        if fn0 <= opts.tol {
            return Ok(NewtonReport {
                x,
                iterations: it,
                residual: fn0,
            });
        }
        let j = sys.jacobian(&x);
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let dx = j.solve(&rhs)?;
        let scale = 1.0 + norm_inf(&x);
        let mut lam = 1.0;
        loop {
            let mut xn: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + lam * d).collect();
            if let Some(fl) = opts.floor {
                for v in &mut xn {
                    if *v < fl {
                        *v = fl;
                    }
                }
            }
            let fnew = sys.residual(&xn);
            let nn = norm_inf(&fnew);
            if nn.is_finite() && nn <= (1.0 - 1e-4 * lam) * fn0 {
                x = xn;
                f = fnew;
                fn0 = nn;
                break;
            }
            lam *= 0.5;
            if lam < 1e-10 {
                // no decrease possible: accept if the Newton step is at roundoff level
                if norm_inf(&dx) <= 1e3 * opts.step_tol * scale && fn0 <= opts.tol.sqrt() {
                    return Ok(NewtonReport {
                        x,
                        iterations: it + 1,
                        residual: fn0,
                    });
                }
                return Err(Error::NoConvergence {
                    stage,
                    iterations: it + 1,
                    residual: fn0,
                });
            }
        }
        if lam == 1.0 && norm_inf(&dx) <= opts.step_tol * scale && fn0 <= opts.tol.sqrt() {
            return Ok(NewtonReport {
                x,
                iterations: it + 1,
                residual: fn0,
            });
        }
    }
    if fn0 <= opts.tol {
        return Ok(NewtonReport {
            x,
            iterations: opts.max_iter,
            residual: fn0,
        });
    }
    Err(Error::NoConvergence {
        stage,
        iterations: opts.max_iter,
        residual: fn0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Triplets;

    struct Sqrt2;
    impl NonlinearSystem for Sqrt2 {
        fn residual(&self, x: &[f64]) -> Vec<f64> {
            vec![x[0] * x[0] - 2.0, x[1] - x[0]]
        }
        fn jacobian(&self, x: &[f64]) -> Csr {
            let mut t = Triplets::new(2, 2);
            t.push(0, 0, 2.0 * x[0]);
            t.push(1, 0, -1.0);
            t.push(1, 1, 1.0);
            t.to_csr()
        }
    }

    #[test]
    fn finds_sqrt2() {
        let r = newton(&Sqrt2, vec![5.0, 0.0], NewtonOptions::default(), "test").unwrap();
        assert!((r.x[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!((r.x[1] - 2f64.sqrt()).abs() < 1e-12);
    }
}
