//! Quasi-Newton (BFGS) ascent with a backtracking line search, shared by the
//! factor-analytic, ranking and kernel REML fits.

use nalgebra::{DMatrix, DVector};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentOptions {
    /// Stop once the relative objective improvement stays below `tol` for
    /// two consecutive iterations.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest coordinate step of the first line-search trial.
    pub max_step: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Objective after each accepted iteration, starting with the initial
    /// point.
    pub trace: Vec<f64>,
}

/// Maximizes `f`, which returns the objective and its gradient. An `Err`
/// from `f` at a trial point (e.g. a non-positive-definite covariance) is
/// treated as an infeasible step and backtracked; at the starting point it
/// is returned.
pub fn maximize<F>(mut f: F, x0: &[f64], opts: &AscentOptions) -> Result<AscentResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    const ARMIJO: f64 = 1e-4;
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut value, g) = f(x.as_slice())?;
    // work with the negated objective
    let mut grad = -DVector::from_vec(g);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh_h = true;
    let mut trace = vec![value];
    let mut small_steps = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let mut dir = -(&h * &grad);
        let mut slope = grad.dot(&dir);
        if !(slope < 0.0) {
            h.fill_with_identity();
            fresh_h = true;
            dir = -grad.clone();
            slope = grad.dot(&dir);
        }
        if slope == 0.0 {
            converged = true;
            break;
        }
        let biggest = dir.amax();
        let mut t = if biggest > opts.max_step { opts.max_step / biggest } else { 1.0 };

        let mut accepted = None;
        for _ in 0..60 {
            let trial = &x + t * &dir;
            if let Ok((v, g)) = f(trial.as_slice()) {
                if v.is_finite() && -v <= -value + ARMIJO * t * slope {
                    accepted = Some((trial, v, -DVector::from_vec(g)));
                    break;
                }
            }
            t *= 0.5;
        }

        let Some((x_new, v_new, g_new)) = accepted else {
            if fresh_h {
                // no ascent along the gradient either: numerically stationary
                converged = true;
                break;
            }
            h.fill_with_identity();
            fresh_h = true;
            continue;
        };
        iterations += 1;

        let s = &x_new - &x;
        let yk = &g_new - &grad;
        let sy = s.dot(&yk);
        if sy > 1e-12 * s.norm() * yk.norm() {
            if fresh_h {
                // scale the identity to the observed curvature before the first update
                h *= sy / yk.dot(&yk);
            }
            let rho = 1.0 / sy;
            let hy = &h * &yk;
            let yhy = yk.dot(&hy);
            // H += (1 + rho yHy) rho s s' - rho (H y s' + s y'H)
            h += (rho * rho * yhy + rho) * (&s * s.transpose()) - rho * (&hy * s.transpose() + &s * hy.transpose());
            fresh_h = false;
        }

        let improvement = (v_new - value) / value.abs().max(1.0);
        x = x_new;
        value = v_new;
        grad = g_new;
        trace.push(value);

        if improvement < opts.tol {
            small_steps += 1;
            if small_steps >= 2 {
                converged = true;
                break;
            }
        } else {
            small_steps = 0;
        }
    }

    Ok(AscentResult {
        x: x.as_slice().to_vec(),
        value,
        gradient: (-grad).as_slice().to_vec(),
        converged,
        iterations,
        trace,
    })
}
