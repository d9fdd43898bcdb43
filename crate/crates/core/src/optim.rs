//! Nonlinear conjugate gradients (Polak–Ribière+) with a quadratic-fit
//! trial step and Armijo backtracking.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop when `|g| <= max(grad_atol, grad_rtol * |g_0|)`.
    pub grad_rtol: f64,
    pub grad_atol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Backtracking factor.
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20000,
            grad_rtol: 1e-9,
            grad_atol: 1e-11,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + a * d).collect()
}

/// Minimizes `f`, which returns the value and gradient. Non-finite trial
/// values are treated as failed steps.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, cfg: &OptimizerConfig) -> OptimResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let g0 = dot(&g, &g).sqrt();
    let tol = cfg.grad_atol.max(cfg.grad_rtol * g0);
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut steepest = true;
    let mut alpha_prev = 1.0 / g0.max(1.0);
    let mut iterations = 0;

    loop {
        let gn = dot(&g, &g).sqrt();
        if gn <= tol {
            return OptimResult { x, value: fx, iterations, converged: true, grad_norm: gn };
        }
        if iterations >= cfg.max_iterations {
            return OptimResult { x, value: fx, iterations, converged: false, grad_norm: gn };
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            slope = -gn * gn;
            steepest = true;
        }
        iterations += 1;

        let Some((alpha, fnew, gnew)) = line_search(&mut f, &x, fx, &d, slope, alpha_prev, cfg) else {
            if steepest {
                return OptimResult { x, value: fx, iterations, converged: false, grad_norm: gn };
            }
            d = g.iter().map(|v| -v).collect();
            steepest = true;
            continue;
        };

        x = axpy(&x, alpha, &d);
        let beta = ((dot(&gnew, &gnew) - dot(&gnew, &g)) / (gn * gn)).max(0.0);
        d = d.iter().zip(&gnew).map(|(d, g)| -g + beta * d).collect();
        steepest = beta == 0.0;
        fx = fnew;
        g = gnew;
        alpha_prev = alpha;
    }
}

/// Secant step on the directional derivative from `trial`, then Armijo
/// backtracking. Near the minimizer value differences drown in round-off,
/// so an approximate Wolfe test on the directional derivative also accepts.
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    fx: f64,
    d: &[f64],
    slope: f64,
    trial: f64,
    cfg: &OptimizerConfig,
) -> Option<(f64, f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let accept = |a: f64, fa: f64, ga: &[f64]| {
        if !fa.is_finite() {
            return false;
        }
        if fa <= fx + cfg.armijo * a * slope {
            return true;
        }
        let da = dot(ga, d);
        fa <= fx + 1e-12 * fx.abs() && da >= 0.9 * slope && da <= -0.8 * slope
    };
    let (ft, gt) = f(&axpy(x, trial, d));
    let mut alpha = trial * cfg.backtrack;
    if ft.is_finite() {
        let dt = dot(&gt, d);
        if dt > slope {
            let a = trial * slope / (slope - dt);
            if (a - trial).abs() > 1e-12 * trial {
                let (fa, ga) = f(&axpy(x, a, d));
                if accept(a, fa, &ga) && (fa <= ft || !accept(trial, ft, &gt)) {
                    return Some((a, fa, ga));
                }
                alpha = a.min(trial) * cfg.backtrack;
            }
        }
        if accept(trial, ft, &gt) {
            return Some((trial, ft, gt));
        }
    }
    for _ in 0..cfg.max_backtracks {
        let (fa, ga) = f(&axpy(x, alpha, d));
        if accept(alpha, fa, &ga) {
            return Some((alpha, fa, ga));
        }
        alpha *= cfg.backtrack;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_in_few_steps() {
        // f = 1/2 x^T A x - b^T x with A = tridiag(-1, 3, -1)
        let n = 20;
        let b: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let f = |x: &[f64]| {
            let ax: Vec<f64> = (0..n)
                .map(|i| {
                    3.0 * x[i] - if i > 0 { x[i - 1] } else { 0.0 } - if i + 1 < n { x[i + 1] } else { 0.0 }
                })
                .collect();
            let v = 0.5 * dot(x, &ax) - dot(&b, x);
            let g = ax.iter().zip(&b).map(|(a, b)| a - b).collect();
            (v, g)
        };
        let r = minimize(f, vec![0.0; n], &OptimizerConfig::default());
        assert!(r.converged);
        assert!(r.iterations <= n + 5);
        let (_, g) = f(&r.x);
        assert!(dot(&g, &g).sqrt() < 1e-8);
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (v, g)
        };
        let r = minimize(f, vec![-1.2, 1.0], &OptimizerConfig::default());
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn barrier_values_are_rejected() {
        // infinite outside |x| < 2, minimum at 1.5
        let f = |x: &[f64]| {
            if x[0].abs() >= 2.0 {
                (f64::INFINITY, vec![0.0])
            } else {
                ((x[0] - 1.5).powi(2), vec![2.0 * (x[0] - 1.5)])
            }
        };
        let r = minimize(f, vec![-1.9], &OptimizerConfig::default());
        assert!(r.converged);
        assert!((r.x[0] - 1.5).abs() < 1e-8);
    }

    #[test]
    fn reports_iteration_cap() {
        let cfg = OptimizerConfig { max_iterations: 2, ..Default::default() };
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            ((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2), vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
        };
        let r = minimize(f, vec![-1.2, 1.0], &cfg);
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
    }
}
