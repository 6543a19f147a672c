//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Deterministic: no randomness, fixed-order arithmetic.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub history: usize,
    pub max_iterations: usize,
    /// Stop once the max-abs gradient entry falls to or below this.
    pub gradient_tolerance: f64,
    /// Stop once the relative decrease of the objective falls below this.
    pub function_tolerance: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            history: 10,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            function_tolerance: 1e7 * f64::EPSILON,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    FunctionDecrease,
    MaxIterations,
    LineSearch,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Probe {
    step: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

/// Minimizes `objective`, which writes the gradient into its second argument
/// and returns the function value.
pub fn minimize<F>(x0: Vec<f64>, mut objective: F, opts: &LbfgsOptions) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = objective(&x, &mut grad);
    check_finite(value, &grad)?;

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.history);
    let mut iterations = 0;

    loop {
        if inf_norm(&grad) <= opts.gradient_tolerance {
            return Ok(done(x, value, grad, iterations, Termination::Gradient));
        }
        if iterations >= opts.max_iterations {
            return Ok(done(x, value, grad, iterations, Termination::MaxIterations));
        }

        let mut direction = two_loop(&grad, &history);
        let mut slope = dot(&grad, &direction);
        if slope >= 0.0 || !slope.is_finite() {
            // Lost descent; restart from steepest descent.
            history.clear();
            direction = grad.iter().map(|g| -g).collect();
            slope = dot(&grad, &direction);
        }
        let initial_step = if history.is_empty() {
            (1.0 / inf_norm(&direction)).min(1.0)
        } else {
            1.0
        };

        let accepted = line_search(&mut objective, &x, value, slope, &direction, initial_step, opts)?;
        let Some(next) = accepted else {
            return Ok(done(x, value, grad, iterations, Termination::LineSearch));
        };
        iterations += 1;

        let s: Vec<f64> = next.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let previous = value;
        x = next.x;
        grad = next.grad;
        value = next.value;
        if sy > 1e-10 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if history.len() == opts.history {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let scale = previous.abs().max(value.abs()).max(1.0);
        if (previous - value) / scale <= opts.function_tolerance {
            let t = if inf_norm(&grad) <= opts.gradient_tolerance {
                Termination::Gradient
            } else {
                Termination::FunctionDecrease
            };
            return Ok(done(x, value, grad, iterations, t));
        }
    }
}

fn done(x: Vec<f64>, value: f64, gradient: Vec<f64>, iterations: usize, t: Termination) -> Minimum {
    Minimum {
        x,
        value,
        gradient,
        iterations,
        termination: t,
    }
}

fn check_finite(value: f64, grad: &[f64]) -> Result<()> {
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite objective value {value}")));
    }
    Ok(())
}

fn two_loop(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

fn evaluate<F>(objective: &mut F, x: &[f64], d: &[f64], step: f64) -> Result<Probe>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let trial: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + step * di).collect();
    let mut grad = vec![0.0; x.len()];
    let value = objective(&trial, &mut grad);
    check_finite(value, &grad)?;
    let slope = dot(&grad, d);
    Ok(Probe {
        step,
        value,
        slope,
        x: trial,
        grad,
    })
}

/// Cubic interpolation minimizer between two bracketing probes, safeguarded to
/// the interior of the bracket.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let (a, b) = (lo.step, hi.step);
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    let width = (b - a).abs();
    let (left, right) = (a.min(b), a.max(b));
    let candidate = if disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2)
    } else {
        f64::NAN
    };
    let margin = 0.1 * width;
    if candidate.is_finite() && candidate > left + margin && candidate < right - margin {
        candidate
    } else {
        0.5 * (a + b)
    }
}

fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    value0: f64,
    slope0: f64,
    d: &[f64],
    initial_step: f64,
    opts: &LbfgsOptions,
) -> Result<Option<Probe>>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut prev = Probe {
        step: 0.0,
        value: value0,
        slope: slope0,
        x: x.to_vec(),
        grad: Vec::new(),
    };
    let mut step = initial_step;
    for i in 0..opts.max_line_search {
        let cur = evaluate(objective, x, d, step)?;
        if cur.value > value0 + opts.c1 * step * slope0 || (i > 0 && cur.value >= prev.value) {
            return zoom(objective, x, value0, slope0, d, prev, cur, opts);
        }
        if cur.slope.abs() <= -opts.c2 * slope0 {
            return Ok(Some(cur));
        }
        if cur.slope >= 0.0 {
            return zoom(objective, x, value0, slope0, d, cur, prev, opts);
        }
        step *= 2.0;
        prev = cur;
    }
    Ok(if prev.step > 0.0 { Some(prev) } else { None })
}

#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    objective: &mut F,
    x: &[f64],
    value0: f64,
    slope0: f64,
    d: &[f64],
    mut lo: Probe,
    mut hi: Probe,
    opts: &LbfgsOptions,
) -> Result<Option<Probe>>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    for _ in 0..opts.max_line_search {
        let step = interpolate(&lo, &hi);
        if (hi.step - lo.step).abs() < 1e-16 * lo.step.abs().max(1.0) {
            break;
        }
        let cur = evaluate(objective, x, d, step)?;
        if cur.value > value0 + opts.c1 * step * slope0 || cur.value >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -opts.c2 * slope0 {
                return Ok(Some(cur));
            }
            if cur.slope * (hi.step - lo.step) >= 0.0 {
                hi = std::mem::replace(&mut lo, cur);
            } else {
                lo = cur;
            }
        }
    }
    // Sufficient decrease without curvature is still progress.
    Ok(if lo.step > 0.0 && lo.value < value0 { Some(lo) } else { None })
}
