//! Parameter-vector optimizers: plain SGD, Adam with per-step learning-rate
//! decay, and a limited-memory BFGS minimizer used by the leakage attack.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ParamVector;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// `params - eta * gradient`
pub fn sgd_step(params: &ParamVector, gradient: &ParamVector, eta: f64) -> Result<ParamVector> {
    gradient.check_dim(params.dim())?;
    Ok(ParamVector::new(
        params
            .iter()
            .zip(gradient.iter())
            .map(|(p, g)| p - eta * g)
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    /// Learning rate used by the next step.
    pub learning_rate: f64,
    /// Multiplied into `learning_rate` after every step.
    pub decay: f64,
}

impl AdamState {
    pub fn new(dim: usize, learning_rate: f64, decay: f64) -> Self {
        Self {
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step_count: 0,
            learning_rate,
            decay,
        }
    }

    pub fn dim(&self) -> usize {
        self.first_moment.len()
    }
}

/// One bias-corrected Adam step. Returns the new parameters and state.
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    gradient: &ParamVector,
) -> Result<(ParamVector, AdamState)> {
    params.check_dim(state.dim())?;
    gradient.check_dim(state.dim())?;

    let mut next = state.clone();
    next.step_count += 1;
    let t = next.step_count as i32;
    let correction1 = 1.0 - ADAM_BETA1.powi(t);
    let correction2 = 1.0 - ADAM_BETA2.powi(t);

    let mut out = params.clone();
    for i in 0..state.dim() {
        let g = gradient[i];
        let m = ADAM_BETA1 * state.first_moment[i] + (1.0 - ADAM_BETA1) * g;
        let v = ADAM_BETA2 * state.second_moment[i] + (1.0 - ADAM_BETA2) * g * g;
        next.first_moment[i] = m;
        next.second_moment[i] = v;
        let m_hat = m / correction1;
        let v_hat = v / correction2;
        out[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    next.learning_rate = state.learning_rate * state.decay;
    Ok((out, next))
}

/// Outcome of [`lbfgs_minimize`].
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Reason [`lbfgs_minimize`] stopped early because the objective left the
/// finite range.
#[derive(Debug, Clone)]
pub struct NonFinite {
    pub iteration: usize,
    pub last_finite: Vec<f64>,
}

/// Limited-memory BFGS with a backtracking Armijo line search.
///
/// `objective` returns the value and gradient at a point. Runs at most
/// `max_iterations` outer iterations and stops once the gradient norm or the
/// objective falls below `tolerance`.
pub fn lbfgs_minimize<F>(
    mut objective: F,
    x0: Vec<f64>,
    max_iterations: usize,
    memory: usize,
    tolerance: f64,
) -> std::result::Result<Minimum, NonFinite>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut fx, mut gx) = objective(&x);
    if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
        return Err(NonFinite {
            iteration: 0,
            last_finite: x,
        });
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(memory);
    let mut iterations = 0;

    while iterations < max_iterations {
        if fx <= tolerance || norm(&gx) <= tolerance {
            break;
        }
        iterations += 1;

        // Two-loop recursion for the search direction.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(&mut q, -a, y);
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / norm(&gx).max(1.0));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(&mut q, a - b, s);
        }
        let mut direction: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&gx, &direction);
        if slope >= 0.0 {
            // Not a descent direction; restart from steepest descent.
            history.clear();
            direction = gx.iter().map(|g| -g / norm(&gx).max(1.0)).collect();
            slope = dot(&gx, &direction);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let candidate: Vec<f64> = x.iter().zip(&direction).map(|(a, d)| a + step * d).collect();
            let (fc, gc) = objective(&candidate);
            if fc.is_finite() && fc <= fx + 1e-4 * step * slope {
                if gc.iter().any(|g| !g.is_finite()) {
                    return Err(NonFinite {
                        iteration: iterations,
                        last_finite: x,
                    });
                }
                accepted = Some((candidate, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // Line search failed: no further progress is possible from here.
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if history.len() == memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
    }

    Ok(Minimum {
        x,
        value: fx,
        iterations,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(target: &mut [f64], a: f64, x: &[f64]) {
    for (t, v) in target.iter_mut().zip(x) {
        *t += a * v;
    }
}
