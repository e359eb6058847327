//! Optimisers: Adam for network training and a backtracking gradient descent
//! for reconstruction objectives.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Budget and tolerances for [`minimize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub max_iters: usize,
    /// Initial step; adapted by backtracking.
    pub step_size: f64,
    /// Stop once `|grad| <= grad_tol * max(|grad_0|, 1e-300)`.
    pub grad_tol: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            step_size: 1.0,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Gradient descent with Armijo backtracking. The accepted step grows by
/// 1.5x after each success so a conservative initial step costs little.
pub fn minimize<F>(mut objective: F, x0: DVector<f64>, cfg: &OptConfig) -> Result<OptOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let mut x = x0;
    let (mut f, mut g) = objective(&x)?;
    if !f.is_finite() {
        return Err(Error::NonFinite("objective at the initial point".into()));
    }
    let g0 = g.norm().max(1e-300);
    let mut step = cfg.step_size;
    let mut iterations = 0;
    let mut stalled = 0;
    while iterations < cfg.max_iters {
        let gn = g.norm();
        if gn <= cfg.grad_tol * g0 {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &x - &g * step;
            let (fc, gc) = objective(&candidate)?;
            if fc.is_finite() && fc <= f - 0.5 * step * gn * gn {
                // Progress below rounding level means the objective can no
                // longer resolve the remaining gradient.
                if f - fc <= 4.0 * f64::EPSILON * f.abs() {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                x = candidate;
                f = fc;
                g = gc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || stalled >= 5 {
            // No descent available at machine precision.
            break;
        }
        step *= 1.5;
    }
    let grad_norm = g.norm();
    Ok(OptOutcome {
        converged: grad_norm <= cfg.grad_tol * g0,
        x,
        value: f,
        grad_norm,
        iterations,
    })
}
