//! Box-constrained BFGS used by the likelihood fits.

use nalgebra::{DMatrix, DVector};

pub(crate) struct Outcome {
    pub x: DVector<f64>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub grad_norm: f64,
}

/// Minimizes `f` over the box `[lo, hi]`.
///
/// `f` returns the value and its gradient. Stops once the projected gradient
/// is below `gtol` in max-norm, or when no step along the search direction
/// decreases the objective any further. Returns `None` on non-finite values.
pub(crate) fn minimize<F>(
    f: F,
    x0: DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    gtol: f64,
    max_iter: usize,
) -> Option<Outcome>
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let project = |x: &mut DVector<f64>| {
        for i in 0..n {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    };
    let projected_grad = |x: &DVector<f64>, g: &DVector<f64>| {
        let mut pg = g.clone();
        for i in 0..n {
            if (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0) {
                pg[i] = 0.0;
            }
        }
        pg
    };

    let mut x = x0;
    project(&mut x);
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut h = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iter {
        let pg = projected_grad(&x, &g);
        if pg.amax() < gtol {
            break;
        }
        let mut d = -(&h * &g);
        // directions that push an active bound outward are dropped
        for i in 0..n {
            if (x[i] <= lo[i] && d[i] < 0.0) || (x[i] >= hi[i] && d[i] > 0.0) {
                d[i] = 0.0;
            }
        }
        if d.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            d = -pg.clone();
        }
        let slope = d.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut xn = &x + &d * step;
            project(&mut xn);
            let (fnew, gnew) = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope.min(0.0) {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        if gnew.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        let improvement = fx - fnew;
        x = xn;
        g = gnew;
        fx = fnew;
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            let b = &i - &y * s.transpose() * rho;
            h = &a * &h * &b + &s * s.transpose() * rho;
        }
        if improvement <= 1e-16 * fx.abs().max(1e-300) && s.amax() <= 1e-14 * x.amax().max(1.0) {
            break;
        }
    }
    let grad_norm = projected_grad(&x, &g).amax();
    Some(Outcome { x, grad_norm })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
            (v, g)
        };
        let out = minimize(f, DVector::from_vec(vec![-1.2, 1.0]), &[-5.0, -5.0], &[5.0, 5.0], 1e-10, 2000).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &DVector<f64>| ((x[0] - 3.0).powi(2), DVector::from_vec(vec![2.0 * (x[0] - 3.0)]));
        let out = minimize(f, DVector::from_vec(vec![0.0]), &[-1.0], &[1.0], 1e-10, 100).unwrap();
        assert_eq!(out.x[0], 1.0);
        assert_eq!(out.grad_norm, 0.0);
    }
}
