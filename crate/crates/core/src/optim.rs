//! Dense BFGS minimiser with a backtracking Armijo line search.
//!
//! The problems solved here have at most a few dozen parameters, so the
//! inverse-Hessian approximation is kept as a full matrix.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the infinity norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Stop when the relative objective change falls below this for
    /// several consecutive iterations.
    pub f_tol: f64,
    /// Abort a run whose iterates leave this box (divergence guard).
    pub max_abs_x: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            grad_tol: 1e-7,
            f_tol: 1e-14,
            max_abs_x: 1e6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimises `f`, which returns the objective value and its gradient.
/// Non-finite objective values are treated as `+inf` by the line search.
pub fn minimize<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g) = f(x.as_slice());
    let mut g = DVector::from_vec(g);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut stall = 0;

    if !fx.is_finite() {
        return BfgsResult {
            x: x.as_slice().to_vec(),
            f: fx,
            grad: g.as_slice().to_vec(),
            iterations: 0,
            converged: false,
        };
    }

    for iter in 0..opts.max_iter {
        if g.amax() < opts.grad_tol {
            return finish(x, fx, g, iter, true);
        }
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if slope.is_nan() || slope >= 0.0 {
            // lost descent direction; restart from steepest descent
            h = DMatrix::identity(n, n);
            d = -g.clone();
            slope = g.dot(&d);
        }

        // initial unit step, shortened for very long first steps
        let mut step = if iter == 0 { (1.0 / d.amax()).min(1.0) } else { 1.0 };
        let c1 = 1e-4;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + step * &d;
            let (fn_, gn) = f(xn.as_slice());
            if fn_.is_finite() && fn_ <= fx + c1 * step * slope {
                accepted = Some((xn, fn_, DVector::from_vec(gn)));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            // no decrease possible along d: at numerical precision limit
            let converged = g.amax() < opts.grad_tol.sqrt();
            return finish(x, fx, g, iter, converged);
        };

        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if iter == 0 {
                // scale the initial approximation
                let yy = y.dot(&y);
                h = DMatrix::identity(n, n) * (sy / yy);
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 yHy + rho) s s'
            h -= rho * (&s * hy.transpose() + &hy * s.transpose());
            h += (rho * rho * yhy + rho) * (&s * s.transpose());
        }

        let rel = (fx - fn_).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fn_;
        g = gn;

        if x.amax() > opts.max_abs_x {
            return finish(x, fx, g, iter + 1, false);
        }
        if rel < opts.f_tol {
            stall += 1;
            if stall >= 3 {
                let converged = g.amax() < opts.grad_tol.sqrt();
                return finish(x, fx, g, iter + 1, converged);
            }
        } else {
            stall = 0;
        }
    }
    let converged = g.amax() < opts.grad_tol;
    finish(x, fx, g, opts.max_iter, converged)
}

fn finish(x: DVector<f64>, f: f64, g: DVector<f64>, iterations: usize, converged: bool) -> BfgsResult {
    BfgsResult {
        x: x.as_slice().to_vec(),
        f,
        grad: g.as_slice().to_vec(),
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let ga = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            let gb = 200.0 * (b - a * a);
            (v, vec![ga, gb])
        };
        let r = minimize(f, &[-1.2, 1.0], &BfgsOptions::default());
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_exact() {
        let f = |x: &[f64]| {
            let v = 3.0 * (x[0] - 2.0).powi(2) + 0.5 * (x[1] + 1.0).powi(2) + (x[2] - 0.1).powi(2);
            (v, vec![6.0 * (x[0] - 2.0), x[1] + 1.0, 2.0 * (x[2] - 0.1)])
        };
        let r = minimize(f, &[0.0, 0.0, 0.0], &BfgsOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 2.0).abs() < 1e-8);
        assert!((r.x[1] + 1.0).abs() < 1e-7);
        assert!((r.x[2] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn divergence_guard() {
        // unbounded below along x
        let f = |x: &[f64]| (-x[0], vec![-1.0]);
        let r = minimize(
            f,
            &[0.0],
            &BfgsOptions {
                max_abs_x: 1e3,
                ..Default::default()
            },
        );
        assert!(!r.converged);
    }
}
