//! Local geometry relaxation: L-BFGS directions with a backtracking (Armijo)
//! line search. Falls back to steepest descent whenever the quasi-Newton
//! direction fails to descend.

use std::collections::VecDeque;

use thiserror::Error;

use super::lj::lj_energy_and_gradient;
use super::Vec3;

#[derive(Debug, Clone, Copy)]
pub struct MinimizeSettings {
    pub max_iter: usize,
    /// Convergence threshold on the largest gradient component.
    pub g_tol: f64,
    /// Number of correction pairs kept by L-BFGS.
    pub memory: usize,
    /// Largest displacement of any single coordinate in one step.
    pub max_step: f64,
}

impl Default for MinimizeSettings {
    fn default() -> Self {
        MinimizeSettings {
            max_iter: 2000,
            g_tol: 1e-6,
            memory: 8,
            max_step: 0.3,
        }
    }
}

impl MinimizeSettings {
    pub fn new(max_iter: usize, g_tol: f64) -> Self {
        MinimizeSettings {
            max_iter,
            g_tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MinimizeError {
    #[error("energy is not finite for the given geometry")]
    Diverged,
    #[error("max_iter must be at least 1")]
    NoIterations,
}

#[derive(Debug, Clone)]
pub struct Relaxed {
    pub coords: Vec<Vec3>,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn flatten(coords: &[Vec3]) -> Vec<f64> {
    coords.iter().flatten().copied().collect()
}

fn unflatten(x: &[f64]) -> Vec<Vec3> {
    x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn evaluate(x: &[f64]) -> Option<(f64, Vec<f64>)> {
    let (e, g) = lj_energy_and_gradient(&unflatten(x)).ok()?;
    Some((e, flatten(&g)))
}

/// Relaxes `coords` toward the nearest local minimum of the LJ energy.
///
/// The returned energy is never above the input energy. Stops once the
/// largest gradient component is at most `g_tol`, after `max_iter`
/// iterations, or when no step along any descent direction lowers the energy.
pub fn local_minimize(coords: &[Vec3], settings: &MinimizeSettings) -> Result<Relaxed, MinimizeError> {
    if settings.max_iter == 0 {
        return Err(MinimizeError::NoIterations);
    }
    let mut x = flatten(coords);
    let (mut e, mut g) = evaluate(&x).ok_or(MinimizeError::Diverged)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(settings.memory);
    let mut iterations = 0;

    while inf_norm(&g) > settings.g_tol && iterations < settings.max_iter {
        iterations += 1;
        let mut d = lbfgs_direction(&g, &history);
        if dot(&d, &g) >= 0.0 {
            history.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let step = match line_search(&x, e, &g, &d, settings.max_step) {
            Some(s) => s,
            None if !history.is_empty() => {
                // quasi-Newton model went stale; retry along the gradient
                history.clear();
                d = g.iter().map(|v| -v).collect();
                match line_search(&x, e, &g, &d, settings.max_step) {
                    Some(s) => s,
                    None => break,
                }
            }
            None => break,
        };
        let (x_new, e_new, g_new) = step;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == settings.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        e = e_new;
        g = g_new;
    }

    Ok(Relaxed {
        converged: inf_norm(&g) <= settings.g_tol,
        coords: unflatten(&x),
        energy: e,
        iterations,
    })
}

/// Two-loop recursion for the L-BFGS search direction.
fn lbfgs_direction(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
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

type Step = (Vec<f64>, f64, Vec<f64>);

fn line_search(x: &[f64], e: f64, g: &[f64], d: &[f64], max_step: f64) -> Option<Step> {
    const C1: f64 = 1e-4;
    let slope = dot(g, d);
    let biggest = inf_norm(d);
    if biggest == 0.0 {
        return None;
    }
    let mut alpha = (max_step / biggest).min(1.0);
    while alpha * biggest > 1e-14 {
        let trial: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        if let Some((e_new, g_new)) = evaluate(&trial) {
            if e_new <= e + C1 * alpha * slope && e_new <= e {
                return Some((trial, e_new, g_new));
            }
        }
        alpha *= 0.5;
    }
    None
}
