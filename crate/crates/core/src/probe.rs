//! Linearized fine-tuning estimator.
//!
//! Fine-tuning an adapter from `theta*` is replaced by a convex regression on
//! projected gradients: a sample with base output `h*`, label `y` and
//! projected gradient `g` contributes `log(1 + exp(b - y g.x))` with
//! `b = -y h*`, where `x` is the displacement in projected space.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, log_loss, sigmoid, softplus};
use crate::optim::{lbfgs, LbfgsParams};
use crate::store::{GradientStore, SampleRecord};

pub const DEFAULT_L2: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Metric {
    #[serde(rename = "val_loss")]
    ValLoss,
    #[serde(rename = "val_accuracy")]
    #[default]
    ValAccuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::ValLoss => "val_loss",
            Metric::ValAccuracy => "val_accuracy",
        }
    }

    /// Scores a set of signed margins `y * h(s)`.
    pub fn score(self, margins: &[f64]) -> f64 {
        let n = margins.len() as f64;
        match self {
            Metric::ValAccuracy => margins.iter().filter(|&&m| m > 0.0).count() as f64 / n,
            Metric::ValLoss => margins.iter().map(|&m| log_loss(m)).sum::<f64>() / n,
        }
    }
}

/// One training example in linearized form.
#[derive(Debug, Clone, Copy)]
pub struct LinearizedSample<'a> {
    pub b: f64,
    pub g: &'a [f64],
    pub y: f64,
    pub weight: f64,
    pub target_r: Option<f64>,
}

impl<'a> LinearizedSample<'a> {
    pub fn from_record(r: &'a SampleRecord) -> Self {
        let y = r.y();
        LinearizedSample { b: -y * r.base_output, g: &r.gradient, y, weight: r.weight, target_r: None }
    }

    /// `h*(s)` recovered from `b = -y h*`.
    pub fn base_output(&self) -> f64 {
        -self.y * self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub l2_reg: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams { l2_reg: DEFAULT_L2, tol: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective/gradient evaluations spent by the optimizer.
    pub evaluations: usize,
}

/// Surrogate log loss of one sample at displacement `x`.
pub fn approx_loss(x: &[f64], s: &LinearizedSample) -> f64 {
    softplus(s.b - s.y * dot(s.g, x))
}

/// Linearized output `h*(s) + g.x`.
pub fn linear_output(x: &[f64], base_output: f64, g: &[f64]) -> f64 {
    base_output + dot(g, x)
}

fn check_samples(samples: &[LinearizedSample], l2_reg: f64) -> Result<(usize, f64)> {
    let first = samples.first().ok_or_else(|| Error::arg("regression needs at least one sample"))?;
    let d = first.g.len();
    if samples.iter().any(|s| s.g.len() != d) {
        return Err(Error::arg("samples have inconsistent gradient dimensions"));
    }
    if !(l2_reg >= 0.0 && l2_reg.is_finite()) {
        return Err(Error::arg(format!("l2_reg must be finite and >= 0, got {l2_reg}")));
    }
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    if !(total > 0.0) {
        return Err(Error::arg("sample weights are all zero"));
    }
    Ok((d, total))
}

/// Mean weighted surrogate loss plus `l2_reg * |x|^2 / 2`, and its gradient.
pub fn logistic_objective(samples: &[LinearizedSample], total_weight: f64, l2_reg: f64, x: &[f64], grad: &mut [f64]) -> f64 {
    grad.iter_mut().zip(x).for_each(|(g, xi)| *g = l2_reg * xi);
    let mut value = 0.0;
    for s in samples {
        if s.weight == 0.0 {
            continue;
        }
        let z = s.b - s.y * dot(s.g, x);
        let w = s.weight / total_weight;
        value += w * softplus(z);
        let coef = -w * s.y * sigmoid(z);
        for (gi, si) in grad.iter_mut().zip(s.g) {
            *gi += coef * si;
        }
    }
    value + 0.5 * l2_reg * dot(x, x)
}

pub fn fit_logistic(samples: &[LinearizedSample], params: &ProbeParams) -> Result<ProbeSolution> {
    let (d, total) = check_samples(samples, params.l2_reg)?;
    let lp = LbfgsParams { tol: params.tol, max_iter: params.max_iter, ..LbfgsParams::default() };
    let m = lbfgs(|x, g| logistic_objective(samples, total, params.l2_reg, x, g), vec![0.0; d], &lp);
    if !m.converged {
        log::debug!("logistic probe stopped after {} iterations, |grad| = {:.3e}", m.iterations, m.grad_norm);
    }
    Ok(ProbeSolution { x: m.x, objective: m.value, iterations: m.iterations, converged: m.converged, evaluations: m.evaluations })
}

/// Ridge least squares in margin space: the stage output `h*(s) + g.x` is fit
/// so that `y * (h* + g.x)` matches `target_r`. For `y = +1` this is the
/// regression of `target_r - h*` on `g`.
///
/// Minimizes `mean_w (y target_r - h* - g.x)^2 + l2_reg |x|^2 / 2` by a direct
/// normal-equations solve; `tol` and `max_iter` are unused.
pub fn fit_residual_ls(samples: &[LinearizedSample], params: &ProbeParams) -> Result<ProbeSolution> {
    let (d, total) = check_samples(samples, params.l2_reg)?;
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for s in samples {
        let r = s.target_r.ok_or_else(|| Error::arg("residual fit needs target_r on every sample"))?;
        if s.weight == 0.0 {
            continue;
        }
        let w = 2.0 * s.weight / total;
        let t = s.y * r - s.base_output();
        let g = DVector::from_column_slice(s.g);
        gram.ger(w, &g, &g, 1.0);
        rhs.axpy(w * t, &g, 1.0);
    }
    for i in 0..d {
        gram[(i, i)] += params.l2_reg;
    }
    let x = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::arg(format!("residual least squares failed: {e}")))?,
    };
    let x: Vec<f64> = x.iter().copied().collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("residual least squares produced non-finite weights"));
    }
    let objective = residual_objective(samples, total, params.l2_reg, &x);
    Ok(ProbeSolution { x, objective, iterations: 1, converged: true, evaluations: 1 })
}

fn residual_objective(samples: &[LinearizedSample], total: f64, l2_reg: f64, x: &[f64]) -> f64 {
    let loss: f64 = samples
        .iter()
        .map(|s| {
            let r = s.target_r.unwrap_or(0.0);
            let e = s.y * r - s.base_output() - dot(s.g, x);
            s.weight * e * e
        })
        .sum::<f64>()
        / total;
    loss + 0.5 * l2_reg * dot(x, x)
}

/// Per-task validation metrics for one subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetEstimate {
    pub subset: Vec<u32>,
    pub metric: Metric,
    pub scores: BTreeMap<u32, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<u32, String>,
}

impl SubsetEstimate {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Scores task `records` under the linearized model at displacement `x`.
pub fn score_records(records: &[SampleRecord], x: &[f64], metric: Metric) -> f64 {
    let margins: Vec<f64> = records.iter().map(|r| r.y() * linear_output(x, r.base_output, &r.gradient)).collect();
    metric.score(&margins)
}

fn normalized_subset(subset: &[u32], store: &GradientStore) -> Result<Vec<u32>> {
    let mut s = subset.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.is_empty() {
        return Err(Error::arg("empty subset"));
    }
    for &t in &s {
        store.task(t)?;
    }
    Ok(s)
}

/// Train samples of the tasks in `subset`, in store order.
pub fn subset_train_samples<'a>(subset: &[u32], store: &'a GradientStore) -> Result<Vec<LinearizedSample<'a>>> {
    let mut out = Vec::new();
    for &t in subset {
        out.extend(store.task(t)?.train.iter().map(LinearizedSample::from_record));
    }
    Ok(out)
}

/// Fits one adapter on the union of the subset's training data and scores each
/// member task on its own validation split.
pub fn estimate_subset_with_solution(
    subset: &[u32],
    store: &GradientStore,
    metric: Metric,
    params: &ProbeParams,
) -> Result<(SubsetEstimate, ProbeSolution)> {
    let s = normalized_subset(subset, store)?;
    let samples = subset_train_samples(&s, store)?;
    if samples.is_empty() {
        return Err(Error::arg(format!("subset {s:?} has no training samples")));
    }
    let sol = fit_logistic(&samples, params)?;
    let mut scores = BTreeMap::new();
    let mut errors = BTreeMap::new();
    for &t in &s {
        let task = store.task(t)?;
        if task.validation.is_empty() {
            errors.insert(t, format!("task {t} has no validation samples"));
        } else {
            scores.insert(t, score_records(&task.validation, &sol.x, metric));
        }
    }
    Ok((SubsetEstimate { subset: s, metric, scores, errors }, sol))
}

pub fn estimate_subset(subset: &[u32], store: &GradientStore, metric: Metric, params: &ProbeParams) -> Result<SubsetEstimate> {
    estimate_subset_with_solution(subset, store, metric, params).map(|(e, _)| e)
}

/// Estimates every subset in parallel; output order follows `subsets`.
pub fn estimate_all(
    subsets: &[Vec<u32>],
    store: &GradientStore,
    metric: Metric,
    params: &ProbeParams,
) -> Result<Vec<(SubsetEstimate, ProbeSolution)>> {
    subsets.par_iter().map(|s| estimate_subset_with_solution(s, store, metric, params)).collect()
}
