//! Small dense BFGS minimiser with Armijo backtracking.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    /// Stop when the infinity norm of the gradient falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Sufficient decrease constant.
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { grad_tol: 1e-8, max_iter: 200, armijo: 1e-4, backtrack: 0.5, max_backtracks: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfgsStatus {
    Converged,
    /// No step along the search direction produced sufficient decrease. This
    /// usually means the iterate sits at the round-off floor of the objective.
    LineSearchFailed,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad: DVector<f64>,
    pub iterations: usize,
    pub status: BfgsStatus,
}

/// Minimise `f`, which returns the value and gradient. The inverse Hessian
/// estimate starts at the identity.
pub fn bfgs<F>(mut f: F, x0: DVector<f64>, opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    for iter in 0..opts.max_iter {
        if g.amax() < opts.grad_tol {
            return BfgsResult { x, value: fx, grad: g, iterations: iter, status: BfgsStatus::Converged };
        }
        let mut p = -(&h_inv * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            // Lost positive definiteness: restart from steepest descent.
            h_inv = DMatrix::identity(n, n);
            p = -&g;
            slope = -g.norm_squared();
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        let scale = 1.0 + x.amax();
        for _ in 0..opts.max_backtracks {
            if alpha * p.amax() < f64::EPSILON * scale {
                break;
            }
            let xn = &x + &p * alpha;
            let (fnew, gnew) = f(&xn);
            if fnew.is_finite() && fnew <= fx + opts.armijo * alpha * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            alpha *= opts.backtrack;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            return BfgsResult { x, value: fx, grad: g, iterations: iter, status: BfgsStatus::LineSearchFailed };
        };
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let left = DMatrix::<f64>::identity(n, n) - &s * y.transpose() * rho;
            h_inv = &left * &h_inv * left.transpose() + &s * s.transpose() * rho;
        }
        x = xn;
        fx = fnew;
        g = gnew;
    }
    let status = if g.amax() < opts.grad_tol { BfgsStatus::Converged } else { BfgsStatus::MaxIterations };
    BfgsResult { x, value: fx, grad: g, iterations: opts.max_iter, status }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn rosenbrock(x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = dvector![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (v, g)
    }

    #[test]
    fn minimises_rosenbrock() {
        let r = bfgs(rosenbrock, dvector![-1.2, 1.0], &BfgsOptions::default());
        assert_eq!(r.status, BfgsStatus::Converged);
        assert!((r.x - dvector![1.0, 1.0]).amax() < 1e-6);
    }

    #[test]
    fn quadratic_converges_quickly() {
        let c = dvector![0.5, -1.0, 2.0, 0.0];
        let q = |x: &DVector<f64>| {
            let w = dvector![1.0, 2.0, 3.0, 4.0];
            let d = x - &c;
            (d.component_mul(&w).dot(&d), 2.0 * d.component_mul(&w))
        };
        let r = bfgs(q, DVector::zeros(4), &BfgsOptions::default());
        assert_eq!(r.status, BfgsStatus::Converged);
        assert!(r.iterations < 30);
        assert!((&r.x - &c).amax() < 1e-8);
    }

    #[test]
    fn starting_at_minimum_takes_no_steps() {
        let r = bfgs(rosenbrock, dvector![1.0, 1.0], &BfgsOptions::default());
        assert_eq!(r.iterations, 0);
        assert_eq!(r.status, BfgsStatus::Converged);
    }

    #[test]
    fn iteration_cap_is_reported() {
        let opts = BfgsOptions { max_iter: 2, ..BfgsOptions::default() };
        let r = bfgs(rosenbrock, dvector![-1.2, 1.0], &opts);
        assert_eq!(r.status, BfgsStatus::MaxIterations);
    }

    #[test]
    fn wrong_gradient_fails_line_search() {
        let f = |x: &DVector<f64>| (x.norm_squared(), -x * 2.0);
        let r = bfgs(f, dvector![1.0, 1.0], &BfgsOptions::default());
        assert_eq!(r.status, BfgsStatus::LineSearchFailed);
    }
}
