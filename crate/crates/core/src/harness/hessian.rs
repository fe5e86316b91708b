//! Curvature of the log loss with respect to adapter weights: exact dense
//! traces, Hutchinson estimates and power iteration.
//!
//! For a sample with label `y` and output `h`, the loss `log(1 + exp(-y h))`
//! has Hessian `p(1-p) grad(h) grad(h)^T - y (1-p) hess(h)` with
//! `p = sigmoid(y h)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::HarnessModel;
use super::synth::Example;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, sigmoid};

/// Largest parameter count for which dense Hessians are formed.
pub const MAX_DENSE_DIM: usize = 512;

/// `H v` for the loss of one example at `theta`.
pub fn loss_hvp(model: &HarnessModel, theta: &[f64], e: &Example, v: &[f64]) -> Vec<f64> {
    let y = e.label as f64;
    let (h, g) = model.output_and_gradient(theta, &e.input);
    let p = sigmoid(y * h);
    let mut out = model.output_hvp(theta, &e.input, v);
    out.iter_mut().for_each(|o| *o *= -y * (1.0 - p));
    axpy(p * (1.0 - p) * dot(&g, v), &g, &mut out);
    out
}

/// `H v` for the weighted mean loss over `examples`.
pub fn mean_loss_hvp(model: &HarnessModel, theta: &[f64], examples: &[Example], v: &[f64]) -> Vec<f64> {
    let total: f64 = examples.iter().map(|e| e.weight).sum();
    let mut out = vec![0.0; v.len()];
    for e in examples {
        axpy(e.weight / total, &loss_hvp(model, theta, e, v), &mut out);
    }
    out
}

/// Trace of the operator `hvp` on `R^dim` from its action on unit vectors.
pub fn dense_trace(hvp: impl Fn(&[f64]) -> Vec<f64>, dim: usize) -> Result<f64> {
    if dim > MAX_DENSE_DIM {
        return Err(Error::arg(format!("dense Hessian limited to {MAX_DENSE_DIM} parameters, got {dim}")));
    }
    let mut e = vec![0.0; dim];
    let mut tr = 0.0;
    for i in 0..dim {
        e[i] = 1.0;
        tr += hvp(&e)[i];
        e[i] = 0.0;
    }
    Ok(tr)
}

/// Hutchinson estimate `mean_k z_k^T H z_k` with Rademacher probes `z_k`.
pub fn hutchinson_trace(hvp: impl Fn(&[f64]) -> Vec<f64>, dim: usize, probes: usize, seed: u64) -> Result<f64> {
    if probes < 1 {
        return Err(Error::arg("Hutchinson estimation needs at least one probe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..probes {
        let z: Vec<f64> = (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        sum += dot(&z, &hvp(&z));
    }
    Ok(sum / probes as f64)
}

/// Dominant eigenvalue (largest in magnitude) by power iteration.
pub fn top_eigenvalue(hvp: impl Fn(&[f64]) -> Vec<f64>, dim: usize, iters: usize, seed: u64) -> Result<f64> {
    if dim == 0 {
        return Err(Error::arg("empty operator"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let w = hvp(&v);
        lambda = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Ok(lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianTarget {
    /// Loss of a single example (index into the given examples).
    Sample(usize),
    /// Maximum per-example trace over the given examples.
    MaxOverPoints,
    /// Weighted mean loss over the given examples.
    MeanLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    /// Dense trace, absent when the model is too large.
    pub exact: Option<f64>,
    pub hutchinson: f64,
}

/// Loss-Hessian trace at `theta` for the chosen target.
pub fn hessian_trace(
    model: &HarnessModel,
    theta: &[f64],
    examples: &[Example],
    target: HessianTarget,
    probes: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    if examples.is_empty() {
        return Err(Error::arg("no examples for the Hessian trace"));
    }
    if probes < 1 {
        return Err(Error::arg("Hutchinson estimation needs at least one probe"));
    }
    let p = model.p();
    for e in examples {
        model.check(theta, &e.input)?;
    }
    let dense_ok = p <= MAX_DENSE_DIM;
    let one = |e: &Example| -> Result<TraceEstimate> {
        let f = |v: &[f64]| loss_hvp(model, theta, e, v);
        Ok(TraceEstimate {
            exact: if dense_ok { Some(dense_trace(f, p)?) } else { None },
            hutchinson: hutchinson_trace(f, p, probes, seed)?,
        })
    };
    match target {
        HessianTarget::Sample(i) => {
            one(examples.get(i).ok_or_else(|| Error::arg(format!("sample index {i} out of range")))?)
        }
        HessianTarget::MaxOverPoints => {
            let all: Vec<TraceEstimate> = examples.iter().map(one).collect::<Result<_>>()?;
            Ok(TraceEstimate {
                exact: if dense_ok {
                    all.iter().filter_map(|t| t.exact).reduce(f64::max)
                } else {
                    None
                },
                hutchinson: all.iter().map(|t| t.hutchinson).fold(f64::NEG_INFINITY, f64::max),
            })
        }
        HessianTarget::MeanLoss => {
            let f = |v: &[f64]| mean_loss_hvp(model, theta, examples, v);
            Ok(TraceEstimate {
                exact: if dense_ok { Some(dense_trace(f, p)?) } else { None },
                hutchinson: hutchinson_trace(f, p, probes, seed)?,
            })
        }
    }
}
