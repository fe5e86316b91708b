//! Deterministic smooth minimizers: limited-memory BFGS with a backtracking
//! Armijo line search, and Euclidean projection onto the probability simplex.

use std::collections::VecDeque;

use crate::linalg::{axpy, dot, norm};

#[derive(Debug, Clone, Copy)]
pub struct LbfgsParams {
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        LbfgsParams { tol: 1e-8, max_iter: 500, memory: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted iteration, starting with the initial point.
    pub history: Vec<f64>,
    /// Objective/gradient evaluations, including line-search trials.
    pub evaluations: usize,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 60;

/// Minimizes `f` from `x0`. `f` writes the gradient into its second argument
/// and returns the objective value.
pub fn lbfgs<F>(mut f: F, x0: Vec<f64>, params: &LbfgsParams) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut value = f(&x, &mut g);
    let mut evaluations = 1;
    let mut history = vec![value];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(params.memory);

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;
    let mut gnorm = norm(&g);

    while gnorm > params.tol && iterations < params.max_iter {
        let mut dir = two_loop(&g, &pairs);
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            pairs.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if pairs.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };

        let mut accepted = false;
        for _ in 0..MAX_BACKTRACK {
            x_new.copy_from_slice(&x);
            axpy(step, &dir, &mut x_new);
            let v = f(&x_new, &mut g_new);
            evaluations += 1;
            let armijo = v <= value + ARMIJO * step * slope;
            // Near the floating-point floor the objective stops resolving
            // decreases; accept a non-increasing step that shrinks the gradient.
            let flat = v <= value && norm(&g_new) < gnorm && (value - v).abs() <= 1e-14 * value.abs().max(1.0);
            if v.is_finite() && (armijo || flat) {
                accepted = true;
                value = v;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if pairs.is_empty() {
                break;
            }
            pairs.clear();
            continue;
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-16 * norm(&s) * norm(&yv) && sy > 0.0 {
            if pairs.len() == params.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, yv, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        gnorm = norm(&g);
        iterations += 1;
        history.push(value);
    }

    Minimum { converged: gnorm <= params.tol, x, value, grad_norm: gnorm, iterations, history, evaluations }
}

fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        axpy(-a, y, &mut q);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        axpy(a - b, s, &mut q);
    }
    q
}

/// Euclidean projection onto `{w >= 0, sum w = 1}` (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|vi| (vi - theta).max(0.0)).collect()
}
