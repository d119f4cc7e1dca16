//! BFGS minimization with central finite-difference gradients.
//!
//! The line search enforces the weak Wolfe conditions by bracketing and
//! bisection, which also behaves on objectives that are only piecewise
//! smooth (sums of Euclidean norms have kinks where a term vanishes).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsConfig {
    pub max_iterations: usize,
    /// Stop once the gradient infinity-norm falls below this value.
    pub gradient_tolerance: f64,
    /// Relative central-difference step, scaled by `max(1, |x_i|)`. Only
    /// used by [`minimize`].
    pub finite_diff_step: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search_steps: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        BfgsConfig {
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            finite_diff_step: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_steps: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    /// No step along the quasi-Newton or steepest-descent direction decreases
    /// the objective any further.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct BfgsReport {
    pub x: Vec<f64>,
    pub f_initial: f64,
    pub f_final: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective value after every accepted step, starting with `f_initial`.
    pub trajectory: Vec<f64>,
}

/// Central-difference gradient with per-coordinate step `rel_step * max(1, |x_i|)`.
pub fn central_gradient<F>(f: &F, x: &[f64], rel_step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = rel_step * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

struct Trial {
    alpha: f64,
    f: f64,
    g: DVector<f64>,
}

/// BFGS with central finite-difference gradients.
pub fn minimize<F>(f: F, x0: &[f64], cfg: &BfgsConfig) -> Result<BfgsReport>
where
    F: Fn(&[f64]) -> f64,
{
    let step = cfg.finite_diff_step;
    minimize_with_gradient(&f, |x: &[f64]| central_gradient(&f, x, step), x0, cfg)
}

/// BFGS with a caller-supplied gradient.
pub fn minimize_with_gradient<F, G>(f: F, gradient: G, x0: &[f64], cfg: &BfgsConfig) -> Result<BfgsReport>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let eval = |x: &DVector<f64>| -> Result<f64> {
        let v = f(x.as_slice());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::SolverFailure(format!(
                "objective evaluated to {v} at {:?}",
                x.as_slice()
            )))
        }
    };
    let grad = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let g = DVector::from_vec(gradient(x.as_slice()));
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(Error::SolverFailure(format!(
                "non-finite gradient at {:?}",
                x.as_slice()
            )))
        }
    };

    let mut x = DVector::from_column_slice(x0);
    let mut fx = eval(&x)?;
    let f_initial = fx;
    let mut g = grad(&x)?;
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut trajectory = vec![fx];
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < cfg.max_iterations {
        if g.amax() < cfg.gradient_tolerance {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut p = -(&h_inv * &g);
        if g.dot(&p) >= 0.0 {
            h_inv = DMatrix::identity(n, n);
            fresh = true;
            p = -&g;
        }
        let trial = match line_search(&eval, &grad, &x, fx, &g, &p, cfg)? {
            Some(trial) => trial,
            None if !fresh => {
                // Retry from steepest descent before giving up.
                h_inv = DMatrix::identity(n, n);
                fresh = true;
                continue;
            }
            None => {
                termination = Termination::Stalled;
                break;
            }
        };
        let s = &p * trial.alpha;
        let y = &trial.g - &g;
        let sy = s.dot(&y);
        if sy > f64::EPSILON * s.norm() * y.norm() {
            if fresh {
                h_inv *= sy / y.dot(&y);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H' = H - rho (H y s^T + s y^T H) + (rho^2 y^T H y + rho) s s^T
            h_inv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x += &s;
        fx = trial.f;
        g = trial.g;
        iterations += 1;
        trajectory.push(fx);
    }

    Ok(BfgsReport {
        x: x.as_slice().to_vec(),
        f_initial,
        f_final: fx,
        iterations,
        termination,
        trajectory,
    })
}

/// Weak Wolfe line search. Returns `None` when no step decreases the objective.
fn line_search<E, G>(
    eval: &E,
    grad: &G,
    x: &DVector<f64>,
    fx: f64,
    g: &DVector<f64>,
    p: &DVector<f64>,
    cfg: &BfgsConfig,
) -> Result<Option<Trial>>
where
    E: Fn(&DVector<f64>) -> Result<f64>,
    G: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let slope = g.dot(p);
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut alpha = 1.0;
    let mut armijo_only: Option<Trial> = None;

    for _ in 0..cfg.max_line_search_steps {
        let candidate = x + p * alpha;
        if candidate == *x {
            break;
        }
        let f_new = eval(&candidate)?;
        if f_new > fx + cfg.c1 * alpha * slope || f_new >= fx {
            hi = alpha;
        } else {
            let g_new = grad(&candidate)?;
            if g_new.dot(p) < cfg.c2 * slope {
                lo = alpha;
                armijo_only = Some(Trial {
                    alpha,
                    f: f_new,
                    g: g_new,
                });
            } else {
                return Ok(Some(Trial {
                    alpha,
                    f: f_new,
                    g: g_new,
                }));
            }
        }
        alpha = if hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            2.0 * alpha
        };
    }
    Ok(armijo_only)
}
