//! Ground-truth fine-tuning: full-batch gradient descent on the true log loss
//! of a harness model.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ledger::{FlopLedger, Phase};
use super::model::HarnessModel;
use super::synth::{Example, HarnessTask};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, log_loss, sigmoid};
use crate::probe::Metric;

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BruteForceParams {
    pub epochs: usize,
    pub lr: f64,
    pub l2_reg: f64,
    pub metric: Metric,
}

impl Default for BruteForceParams {
    fn default() -> Self {
        BruteForceParams { epochs: 10, lr: 0.5, l2_reg: crate::probe::DEFAULT_L2, metric: Metric::ValAccuracy }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub subset: Vec<u32>,
    pub theta: Vec<f64>,
    pub scores: BTreeMap<u32, f64>,
    /// Objective before every epoch and after the last one.
    pub objective_history: Vec<f64>,
}

impl BruteForceResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_history.last().unwrap()
    }
}

/// Mean weighted log loss plus `l2_reg |theta - theta*|^2 / 2`, and its
/// gradient when `grad` is given.
pub fn true_objective(
    model: &HarnessModel,
    theta: &[f64],
    examples: &[&Example],
    l2_reg: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let total: f64 = examples.iter().map(|e| e.weight).sum();
    let diff: Vec<f64> = theta.iter().zip(&model.theta_star).map(|(a, b)| a - b).collect();
    let reg = 0.5 * l2_reg * dot(&diff, &diff);
    match grad {
        None => {
            let loss: f64 =
                examples.iter().map(|e| e.weight * log_loss(e.label as f64 * model.output(theta, &e.input))).sum();
            loss / total + reg
        }
        Some(grad) => {
            grad.iter_mut().zip(&diff).for_each(|(g, d)| *g = l2_reg * d);
            let mut loss = 0.0;
            for e in examples {
                let y = e.label as f64;
                let (h, gh) = model.output_and_gradient(theta, &e.input);
                let w = e.weight / total;
                loss += w * log_loss(y * h);
                axpy(-w * y * sigmoid(-y * h), &gh, grad);
            }
            loss + reg
        }
    }
}

/// Scores `examples` by the true model output at `theta`.
pub fn score_examples(model: &HarnessModel, theta: &[f64], examples: &[Example], metric: Metric) -> f64 {
    let margins: Vec<f64> = examples.iter().map(|e| e.label as f64 * model.output(theta, &e.input)).collect();
    metric.score(&margins)
}

/// Fine-tunes all parameters on the union of the subset's training data from
/// `theta*` and scores every member task on its validation split.
pub fn finetune_bruteforce(
    model: &HarnessModel,
    tasks: &[HarnessTask],
    subset: &[u32],
    params: &BruteForceParams,
    ledger: &FlopLedger,
) -> Result<BruteForceResult> {
    let mut s = subset.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.is_empty() {
        return Err(Error::arg("empty subset"));
    }
    let mut train: Vec<&Example> = Vec::new();
    for &t in &s {
        let task = tasks.get(t as usize).ok_or_else(|| Error::arg(format!("task {t} out of range")))?;
        train.extend(task.train.iter());
    }
    if train.is_empty() {
        return Err(Error::arg(format!("subset {s:?} has no training samples")));
    }
    if !(params.lr >= 0.0 && params.lr.is_finite()) {
        return Err(Error::arg(format!("learning rate must be finite and >= 0, got {}", params.lr)));
    }

    let n = train.len() as u64;
    let mut theta = model.theta_star.clone();
    let mut grad = vec![0.0; theta.len()];
    let mut history = Vec::with_capacity(params.epochs + 1);
    for epoch in 0..params.epochs {
        let value = true_objective(model, &theta, &train, params.l2_reg, Some(&mut grad));
        ledger.add_forward(Phase::BruteForce, n);
        ledger.add_backward(Phase::BruteForce, n);
        if !(value <= DIVERGENCE_LOSS) {
            return Err(Error::Divergence { epoch, loss: value });
        }
        history.push(value);
        axpy(-params.lr, &grad, &mut theta);
    }
    let last = true_objective(model, &theta, &train, params.l2_reg, None);
    ledger.add_forward(Phase::BruteForce, n);
    if !(last <= DIVERGENCE_LOSS) {
        return Err(Error::Divergence { epoch: params.epochs, loss: last });
    }
    history.push(last);

    let mut scores = BTreeMap::new();
    for &t in &s {
        let val = &tasks[t as usize].validation;
        if !val.is_empty() {
            ledger.add_forward(Phase::BruteForce, val.len() as u64);
            scores.insert(t, score_examples(model, &theta, val, params.metric));
        }
    }
    Ok(BruteForceResult { subset: s, theta, scores, objective_history: history })
}

/// Runs [`finetune_bruteforce`] for every subset in parallel.
pub fn finetune_many(
    model: &HarnessModel,
    tasks: &[HarnessTask],
    subsets: &[Vec<u32>],
    params: &BruteForceParams,
    ledger: &FlopLedger,
) -> Result<Vec<BruteForceResult>> {
    subsets.par_iter().map(|s| finetune_bruteforce(model, tasks, s, params, ledger)).collect()
}
