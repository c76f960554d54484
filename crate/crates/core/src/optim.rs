//! Derivative-free simplex search and a finite-difference quasi-Newton method,
//! both over unconstrained parameters (bounds are handled by reparametrisation
//! at the call site).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub max_evals: usize,
    /// Simplex diameter below which the search stops.
    pub xtol: f64,
    /// Relative spread of simplex values below which the search stops.
    pub ftol: f64,
    /// Number of times the simplex is rebuilt around the incumbent after convergence.
    pub restarts: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings { max_evals: 2000, xtol: 1e-6, ftol: 1e-10, restarts: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

fn clean(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Nelder–Mead with dimension-adaptive coefficients.
///
/// `step` gives the initial simplex edge per coordinate. The starting point is
/// always a vertex, so the returned value never exceeds `f(x0)`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], step: &[f64], settings: &OptimizerSettings) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        clean(f(x))
    };
    let mut best_x = x0.to_vec();
    let mut best_f = eval(x0, &mut evals);
    if n == 0 {
        return Minimum { x: best_x, value: best_f, evals, converged: true };
    }
    let nf = n as f64;
    let (alpha, beta, gamma, delta) =
        if n >= 3 { (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf) } else { (1.0, 2.0, 0.5, 0.5) };
    let mut converged = false;
    for round in 0..=settings.restarts {
        if evals >= settings.max_evals {
            break;
        }
        // simplex around the incumbent; later rounds shrink the edge
        let shrink = 0.5f64.powi(round as i32);
        let mut pts: Vec<Vec<f64>> = vec![best_x.clone()];
        let mut vals = vec![best_f];
        for i in 0..n {
            let mut p = best_x.clone();
            p[i] += step[i] * shrink;
            vals.push(eval(&p, &mut evals));
            pts.push(p);
        }
        converged = false;
        while evals < settings.max_evals {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            pts = order.iter().map(|&k| pts[k].clone()).collect();
            vals = order.iter().map(|&k| vals[k]).collect();

            let spread = (vals[n] - vals[0]).abs();
            let diam = pts[1..]
                .iter()
                .map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if vals[0].is_finite()
                && (diam <= settings.xtol || spread <= settings.ftol * (vals[0].abs() + settings.ftol))
            {
                converged = true;
                break;
            }

            let mut centroid = vec![0.0; n];
            for p in &pts[..n] {
                for (c, v) in centroid.iter_mut().zip(p) {
                    *c += v / nf;
                }
            }
            let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&pts[n]).map(|(c, w)| c + t * (c - w)).collect() };
            let xr = along(alpha);
            let fr = eval(&xr, &mut evals);
            if fr < vals[0] {
                let xe = along(alpha * beta);
                let fe = eval(&xe, &mut evals);
                if fe < fr {
                    pts[n] = xe;
                    vals[n] = fe;
                } else {
                    pts[n] = xr;
                    vals[n] = fr;
                }
            } else if fr < vals[n - 1] {
                pts[n] = xr;
                vals[n] = fr;
            } else {
                let outside = fr < vals[n];
                let xc = if outside { along(alpha * gamma) } else { along(-gamma) };
                let fc = eval(&xc, &mut evals);
                if (outside && fc <= fr) || (!outside && fc < vals[n]) {
                    pts[n] = xc;
                    vals[n] = fc;
                } else {
                    for k in 1..=n {
                        let p: Vec<f64> = pts[0].iter().zip(&pts[k]).map(|(b, x)| b + delta * (x - b)).collect();
                        vals[k] = eval(&p, &mut evals);
                        pts[k] = p;
                    }
                }
            }
        }
        let (k, &v) = vals.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty simplex");
        if v < best_f {
            best_f = v;
            best_x = pts[k].clone();
        }
    }
    Minimum { x: best_x, value: best_f, evals, converged }
}

/// Central-difference gradient with relative step.
pub fn numerical_gradient<F>(f: &mut F, x: &[f64], rel_step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = rel_step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// BFGS with finite-difference gradients and a backtracking Armijo line search.
pub fn bfgs<F>(mut f: F, x0: &[f64], max_iter: usize, gtol: f64) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut fx = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        clean(f(x))
    };
    let mut x = DVector::from_column_slice(x0);
    let mut fval = fx(x.as_slice(), &mut evals);
    let grad = |x: &DVector<f64>, evals: &mut usize, fx: &mut dyn FnMut(&[f64], &mut usize) -> f64| {
        let mut e = 0usize;
        let g = numerical_gradient(&mut |p: &[f64]| fx(p, &mut e), x.as_slice(), 1e-6);
        *evals += e;
        DVector::from_vec(g)
    };
    let mut g = grad(&x, &mut evals, &mut fx);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    for _ in 0..max_iter {
        if !fval.is_finite() || g.iter().any(|v| !v.is_finite()) {
            break;
        }
        if g.amax() <= gtol {
            converged = true;
            break;
        }
        let mut dir = -(&hinv * &g);
        if dir.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + t * &dir;
            let fc = fx(cand.as_slice(), &mut evals);
            if fc <= fval + 1e-4 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            converged = g.amax() <= gtol.sqrt();
            break;
        };
        let gn = grad(&xn, &mut evals, &mut fx);
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            hinv = &left * &hinv * &right + rho * &s * s.transpose();
        }
        let small_step = (fval - fnew).abs() <= 1e-14 * (fval.abs() + 1e-14);
        x = xn;
        fval = fnew;
        g = gn;
        if small_step {
            converged = true;
            break;
        }
    }
    Minimum { x: x.as_slice().to_vec(), value: fval, evals, converged }
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
