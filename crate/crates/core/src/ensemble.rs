//! Group adapters, gradient boosting on the worst group, AdaBoost, and
//! trained combination weights.
//!
//! Every adapter is a displacement `x` in projected gradient space whose
//! linearized output on a sample is `h*(s) + g.x`. A group's chain combines
//! its stage-0 adapter with boosting stages scaled by `eta`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::Partition;
use crate::error::{Error, Result};
use crate::harness::bruteforce::{finetune_bruteforce, BruteForceParams};
use crate::harness::ledger::FlopLedger;
use crate::harness::model::HarnessModel;
use crate::harness::synth::HarnessTask;
use crate::linalg::{log_loss, sigmoid};
use crate::optim::project_simplex;
use crate::probe::{fit_logistic, fit_residual_ls, linear_output, subset_train_samples, LinearizedSample, ProbeParams};
use crate::store::{GradientStore, SampleRecord};

pub const DEFAULT_ETA: f64 = 0.1;
/// Cap on the AdaBoost stage weight when a stage makes no training errors.
pub const ALPHA_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitKind {
    Logistic,
    ResidualLs,
    /// Brute-force fine-tuned on the harness (identity projection only).
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub x: Vec<f64>,
    pub group_id: usize,
    pub stage: usize,
    pub kind: FitKind,
}

impl Adapter {
    pub fn output(&self, r: &SampleRecord) -> f64 {
        linear_output(&self.x, r.base_output, &r.gradient)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    #[default]
    ByTask,
    Blended,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub eta: f64,
    pub max_boost_steps: usize,
    /// Boosting stops once a step improves the group loss by less than this fraction.
    pub min_rel_improvement: f64,
    /// Regression settings for stage-0 adapters.
    pub probe: ProbeParams,
    /// Ridge weight for residual stages.
    pub residual_l2: f64,
    pub weight_iters: usize,
    pub routing: Routing,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        EnsembleParams {
            eta: DEFAULT_ETA,
            max_boost_steps: 10,
            min_rel_improvement: 0.005,
            probe: ProbeParams::default(),
            residual_l2: crate::probe::DEFAULT_L2,
            weight_iters: 500,
            routing: Routing::ByTask,
        }
    }
}

/// One boosting step as it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostStep {
    pub group: usize,
    pub pre_loss: f64,
    pub post_loss: f64,
    pub pre_error: f64,
    pub post_error: f64,
    /// Stage index of the appended adapter; `None` when the stage was rejected.
    pub stage: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub partition: Partition,
    pub chains: Vec<Vec<Adapter>>,
    pub eta: f64,
    pub weights: Vec<f64>,
    pub trace: Vec<BoostStep>,
    pub routing: Routing,
}

impl EnsembleModel {
    pub fn new(partition: Partition, stage0: Vec<Adapter>, eta: f64, routing: Routing) -> Result<Self> {
        if stage0.len() != partition.m() {
            return Err(Error::arg(format!("{} adapters for {} groups", stage0.len(), partition.m())));
        }
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::arg(format!("eta must lie in (0, 1], got {eta}")));
        }
        let m = partition.m();
        Ok(EnsembleModel {
            partition,
            chains: stage0.into_iter().map(|a| vec![a]).collect(),
            eta,
            weights: vec![1.0 / m as f64; m],
            trace: Vec::new(),
            routing,
        })
    }

    pub fn m(&self) -> usize {
        self.chains.len()
    }

    /// Total adapter count `M = m + accepted boosting stages`.
    pub fn adapter_count(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn accepted_stages(&self) -> usize {
        self.trace.iter().filter(|s| s.stage.is_some()).count()
    }
}

/// Linearized chain output `h_0 + eta * sum_{t >= 1} h_t`.
pub fn group_output(chain: &[Adapter], eta: f64, r: &SampleRecord) -> f64 {
    let mut out = chain[0].output(r);
    for a in &chain[1..] {
        out += eta * a.output(r);
    }
    out
}

fn group_tasks<'a>(partition: &'a Partition, g: usize) -> &'a [u32] {
    &partition.groups[g]
}

fn group_train<'a>(partition: &Partition, g: usize, store: &'a GradientStore) -> Result<Vec<&'a SampleRecord>> {
    let mut out = Vec::new();
    for &t in group_tasks(partition, g) {
        out.extend(store.task(t)?.train.iter());
    }
    Ok(out)
}

/// Weighted mean log loss and error rate of a chain on `records`.
pub fn chain_loss_error(chain: &[Adapter], eta: f64, records: &[&SampleRecord]) -> (f64, f64) {
    let total: f64 = records.iter().map(|r| r.weight).sum();
    let mut loss = 0.0;
    let mut wrong = 0usize;
    for r in records {
        let m = r.y() * group_output(chain, eta, r);
        loss += r.weight * log_loss(m);
        if m <= 0.0 {
            wrong += 1;
        }
    }
    (loss / total, wrong as f64 / records.len() as f64)
}

/// One stage-0 adapter per group, fit on the union of the group's training data.
pub fn fit_group_adapters(partition: &Partition, store: &GradientStore, params: &ProbeParams) -> Result<Vec<Adapter>> {
    partition.validate(store.n_tasks())?;
    (0..partition.m())
        .map(|g| {
            let samples = subset_train_samples(group_tasks(partition, g), store)?;
            if samples.is_empty() {
                return Err(Error::arg(format!("group {g} ({:?}) has no training data", partition.groups[g])));
            }
            let sol = fit_logistic(&samples, params)?;
            Ok(Adapter { x: sol.x, group_id: g, stage: 0, kind: FitKind::Logistic })
        })
        .collect()
}

/// Stage-0 adapters from brute-force fine-tuning of a harness model. Only
/// valid when `store` holds unprojected gradients of `model`.
pub fn fit_group_adapters_oracle(
    partition: &Partition,
    store: &GradientStore,
    model: &HarnessModel,
    tasks: &[HarnessTask],
    params: &BruteForceParams,
    ledger: &FlopLedger,
) -> Result<Vec<Adapter>> {
    if store.header.projected || store.dim() != model.p() {
        return Err(Error::arg("the oracle backend requires an identity-projection store of the harness model"));
    }
    partition.validate(store.n_tasks())?;
    (0..partition.m())
        .map(|g| {
            let r = finetune_bruteforce(model, tasks, group_tasks(partition, g), params, ledger)?;
            let x = r.theta.iter().zip(&model.theta_star).map(|(a, b)| a - b).collect();
            Ok(Adapter { x, group_id: g, stage: 0, kind: FitKind::Oracle })
        })
        .collect()
}

/// Fits one residual stage on the group with the highest training loss.
/// The stage is kept only if it does not increase that loss.
pub fn boosting_step(model: &mut EnsembleModel, store: &GradientStore, params: &EnsembleParams) -> Result<BoostStep> {
    if model.m() == 0 {
        return Err(Error::arg("ensemble has no groups"));
    }
    let mut stats = Vec::with_capacity(model.m());
    for g in 0..model.m() {
        let recs = group_train(&model.partition, g, store)?;
        stats.push(chain_loss_error(&model.chains[g], model.eta, &recs));
    }
    let mut group = 0;
    for (g, s) in stats.iter().enumerate() {
        if s.0 > stats[group].0 {
            group = g;
        }
    }
    let (pre_loss, pre_error) = stats[group];
    let recs = group_train(&model.partition, group, store)?;
    let samples: Vec<LinearizedSample> = recs
        .iter()
        .map(|r| {
            let mut s = LinearizedSample::from_record(r);
            s.target_r = Some(1.0 - sigmoid(r.y() * group_output(&model.chains[group], model.eta, r)));
            s
        })
        .collect();
    let fit = fit_residual_ls(&samples, &ProbeParams { l2_reg: params.residual_l2, ..params.probe });
    let mut step = BoostStep {
        group,
        pre_loss,
        post_loss: pre_loss,
        pre_error,
        post_error: pre_error,
        stage: None,
        note: None,
    };
    match fit {
        Err(e) => {
            log::warn!("boosting stage for group {group} rejected: {e}");
            step.note = Some(format!("residual fit failed: {e}"));
        }
        Ok(sol) => {
            let stage = model.chains[group].len();
            let mut chain = model.chains[group].clone();
            chain.push(Adapter { x: sol.x, group_id: group, stage, kind: FitKind::ResidualLs });
            let (post_loss, post_error) = chain_loss_error(&chain, model.eta, &recs);
            if post_loss <= pre_loss {
                model.chains[group] = chain;
                step.post_loss = post_loss;
                step.post_error = post_error;
                step.stage = Some(stage);
            } else {
                log::warn!("boosting stage for group {group} rejected: loss {pre_loss:.6} -> {post_loss:.6}");
                step.note = Some(format!("training loss would increase to {post_loss}"));
            }
        }
    }
    model.trace.push(step.clone());
    Ok(step)
}

/// Repeats [`boosting_step`] until a stage is rejected, the relative loss
/// improvement drops below `min_rel_improvement`, or the step budget is spent.
pub fn boost(model: &mut EnsembleModel, store: &GradientStore, params: &EnsembleParams) -> Result<()> {
    for _ in 0..params.max_boost_steps {
        let step = boosting_step(model, store, params)?;
        if step.stage.is_none() {
            break;
        }
        let rel = if step.pre_loss > 0.0 { (step.pre_loss - step.post_loss) / step.pre_loss } else { 0.0 };
        if rel < params.min_rel_improvement {
            break;
        }
    }
    Ok(())
}

/// Outputs of every group chain on every record.
fn output_matrix(model: &EnsembleModel, records: &[&SampleRecord]) -> Vec<Vec<f64>> {
    records.iter().map(|r| model.chains.iter().map(|c| group_output(c, model.eta, r)).collect()).collect()
}

fn blended_loss(outputs: &[Vec<f64>], ys: &[f64], w: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let n = ys.len() as f64;
    let mut loss = 0.0;
    let mut g = vec![0.0; w.len()];
    for (row, &y) in outputs.iter().zip(ys) {
        let z: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
        loss += log_loss(y * z);
        let c = -y * sigmoid(-y * z) / n;
        for (gj, oj) in g.iter_mut().zip(row) {
            *gj += c * oj;
        }
    }
    if let Some(out) = grad {
        out.copy_from_slice(&g);
    }
    loss / n
}

/// Mean validation log loss of the blended ensemble for weights `w`.
pub fn combination_loss(model: &EnsembleModel, records: &[&SampleRecord], w: &[f64]) -> f64 {
    let outputs = output_matrix(model, records);
    let ys: Vec<f64> = records.iter().map(|r| r.y()).collect();
    blended_loss(&outputs, &ys, w, None)
}

/// Simplex weights minimizing the blended validation log loss, by projected
/// gradient descent from uniform weights. Returns a warning when the
/// validation labels are single-class, in which case weights stay uniform.
pub fn train_combination_weights(
    model: &EnsembleModel,
    records: &[&SampleRecord],
    iters: usize,
) -> Result<(Vec<f64>, Option<String>)> {
    let m = model.m();
    let uniform = vec![1.0 / m as f64; m];
    if m == 1 {
        return Ok((vec![1.0], None));
    }
    if records.is_empty() {
        return Ok((uniform, Some("no validation records; using uniform weights".into())));
    }
    let first = records[0].label;
    if records.iter().all(|r| r.label == first) {
        log::warn!("validation labels are single-class; using uniform combination weights");
        return Ok((uniform, Some("single-class validation set; using uniform weights".into())));
    }
    let outputs = output_matrix(model, records);
    let ys: Vec<f64> = records.iter().map(|r| r.y()).collect();
    let mut w = uniform;
    let mut grad = vec![0.0; m];
    let mut value = blended_loss(&outputs, &ys, &w, Some(&mut grad));
    let mut step = 1.0;
    for _ in 0..iters {
        let mut accepted = false;
        for _ in 0..50 {
            let cand = project_simplex(&w.iter().zip(&grad).map(|(a, g)| a - step * g).collect::<Vec<_>>());
            let mut cg = vec![0.0; m];
            let cv = blended_loss(&outputs, &ys, &cand, Some(&mut cg));
            let moved: f64 = cand.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum();
            if cv <= value - 1e-4 * moved / step || (moved == 0.0 && cv <= value) {
                accepted = moved > 0.0;
                if accepted {
                    w = cand;
                    value = cv;
                    grad = cg;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step *= 2.0;
    }
    Ok((w, None))
}

/// Ensemble score for one sample.
pub fn predict(model: &EnsembleModel, r: &SampleRecord, routing: Routing) -> Result<f64> {
    match routing {
        Routing::ByTask => {
            let g = model
                .partition
                .group_of(r.task_id)
                .ok_or_else(|| Error::Routing(format!("task {} is not in the partition", r.task_id)))?;
            Ok(group_output(&model.chains[g], model.eta, r))
        }
        Routing::Blended => {
            Ok(model.chains.iter().zip(&model.weights).map(|(c, w)| w * group_output(c, model.eta, r)).sum())
        }
    }
}

/// Per-task validation accuracy of the ensemble.
pub fn task_accuracies(model: &EnsembleModel, store: &GradientStore, routing: Routing) -> Result<BTreeMap<u32, f64>> {
    let mut out = BTreeMap::new();
    for task in &store.tasks {
        if task.validation.is_empty() {
            continue;
        }
        let mut correct = 0usize;
        for r in &task.validation {
            if r.y() * predict(model, r, routing)? > 0.0 {
                correct += 1;
            }
        }
        out.insert(task.task_id, correct as f64 / task.validation.len() as f64);
    }
    Ok(out)
}

/// Fits stage-0 adapters, boosts, and trains combination weights on the
/// validation split.
pub fn fit_ensemble(partition: &Partition, store: &GradientStore, params: &EnsembleParams) -> Result<EnsembleModel> {
    let adapters = fit_group_adapters(partition, store, &params.probe)?;
    finish_ensemble(partition, adapters, store, params)
}

/// Boosting and weight training on top of given stage-0 adapters.
pub fn finish_ensemble(
    partition: &Partition,
    adapters: Vec<Adapter>,
    store: &GradientStore,
    params: &EnsembleParams,
) -> Result<EnsembleModel> {
    let mut model = EnsembleModel::new(partition.clone(), adapters, params.eta, params.routing)?;
    boost(&mut model, store, params)?;
    let val: Vec<&SampleRecord> = store.tasks.iter().flat_map(|t| t.validation.iter()).collect();
    let (w, _) = train_combination_weights(&model, &val, params.weight_iters)?;
    model.weights = w;
    Ok(model)
}

// ---------------------------------------------------------------------------
// AdaBoost

/// Stage weight `ln((1 - err) / err) + ln(K - 1)`, capped at [`ALPHA_MAX`].
pub fn adaboost_alpha(err: f64, k: usize) -> f64 {
    let extra = ((k - 1) as f64).ln();
    if err <= 0.0 {
        return ALPHA_MAX;
    }
    (((1.0 - err) / err).ln() + extra).min(ALPHA_MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaBoostStage {
    pub x: Vec<f64>,
    pub alpha: f64,
    pub weighted_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaBoostModel {
    pub stages: Vec<AdaBoostStage>,
    /// Sum of the sample weights after every completed iteration.
    pub weight_sums: Vec<f64>,
    /// Ensemble training error after every accepted stage.
    pub train_errors: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
}

impl AdaBoostModel {
    /// `sum_m alpha_m h_m(s)` over the linearized stage outputs.
    pub fn score(&self, r: &SampleRecord) -> f64 {
        self.stages.iter().map(|s| s.alpha * linear_output(&s.x, r.base_output, &r.gradient)).sum()
    }
}

/// Binary AdaBoost over all training records of `store` with weighted
/// logistic probes as weak learners.
pub fn adaboost_fit(store: &GradientStore, iterations: usize, k: usize, params: &ProbeParams) -> Result<AdaBoostModel> {
    if iterations == 0 {
        return Err(Error::arg("AdaBoost needs at least one iteration"));
    }
    if k != 2 {
        return Err(Error::arg(format!("binary stores only; got K = {k}")));
    }
    let records: Vec<&SampleRecord> = store.tasks.iter().flat_map(|t| t.train.iter()).collect();
    if records.is_empty() {
        return Err(Error::arg("no training records"));
    }
    let n = records.len();
    let mut d = vec![1.0 / n as f64; n];
    let mut model = AdaBoostModel { stages: Vec::new(), weight_sums: Vec::new(), train_errors: Vec::new(), stop_reason: None };
    let mut scores = vec![0.0; n];

    for _ in 0..iterations {
        let samples: Vec<LinearizedSample> = records
            .iter()
            .zip(&d)
            .map(|(r, &w)| LinearizedSample { weight: w, ..LinearizedSample::from_record(r) })
            .collect();
        let sol = fit_logistic(&samples, params)?;
        let outputs: Vec<f64> = records.iter().map(|r| linear_output(&sol.x, r.base_output, &r.gradient)).collect();
        let wrong: Vec<bool> = records.iter().zip(&outputs).map(|(r, h)| r.y() * h <= 0.0).collect();
        let err: f64 = wrong.iter().zip(&d).filter(|(w, _)| **w).map(|(_, di)| di).sum::<f64>() / d.iter().sum::<f64>();
        if err >= (k - 1) as f64 / k as f64 {
            model.stop_reason = Some(format!("weighted error {err:.4} violates the weak-learner condition"));
            break;
        }
        let alpha = adaboost_alpha(err, k);
        for (di, &w) in d.iter_mut().zip(&wrong) {
            if w {
                *di *= alpha.exp();
            }
        }
        for (s, h) in scores.iter_mut().zip(&outputs) {
            *s += alpha * h;
        }
        let total: f64 = d.iter().sum();
        d.iter_mut().for_each(|v| *v /= total);
        model.weight_sums.push(d.iter().sum());
        model.stages.push(AdaBoostStage { x: sol.x, alpha, weighted_error: err });
        let ens_err = scores.iter().zip(&records).filter(|(s, r)| r.y() * **s <= 0.0).count() as f64 / n as f64;
        model.train_errors.push(ens_err);
        if err == 0.0 {
            model.stop_reason = Some("weak learner fit the training data exactly".into());
            break;
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub stage: usize,
    pub kind: FitKind,
    pub dim: usize,
    /// Blob path relative to the manifest directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub groups: Vec<Vec<u32>>,
    pub adapters: Vec<Vec<AdapterEntry>>,
    pub eta: f64,
    pub weights: Vec<f64>,
    pub trace: Vec<BoostStep>,
    pub routing: Routing,
    pub adapter_count: usize,
}

pub const MANIFEST_FILE: &str = "ensemble.json";

fn write_blob(path: &Path, x: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * x.len());
    for v in x {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path, dim: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != 8 * dim {
        return Err(Error::Corruption(format!("{}: {} bytes, expected {}", path.display(), bytes.len(), 8 * dim)));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Writes `ensemble.json` and one little-endian f64 blob per adapter under `dir/adapters/`.
pub fn save_ensemble(model: &EnsembleModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("adapters"))?;
    let mut adapters = Vec::new();
    for (g, chain) in model.chains.iter().enumerate() {
        let mut entries = Vec::new();
        for a in chain {
            let rel = format!("adapters/group{g}_stage{}.f64", a.stage);
            write_blob(&dir.join(&rel), &a.x)?;
            entries.push(AdapterEntry { stage: a.stage, kind: a.kind, dim: a.x.len(), path: rel });
        }
        adapters.push(entries);
    }
    let manifest = EnsembleManifest {
        groups: model.partition.groups.clone(),
        adapters,
        eta: model.eta,
        weights: model.weights.clone(),
        trace: model.trace.clone(),
        routing: model.routing,
        adapter_count: model.adapter_count(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<EnsembleModel> {
    let manifest: EnsembleManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut chains = Vec::new();
    for (g, entries) in manifest.adapters.iter().enumerate() {
        let mut chain = Vec::new();
        for e in entries {
            chain.push(Adapter { x: read_blob(&dir.join(&e.path), e.dim)?, group_id: g, stage: e.stage, kind: e.kind });
        }
        if chain.is_empty() {
            return Err(Error::Format(format!("group {g} has no adapters")));
        }
        chains.push(chain);
    }
    let partition = Partition::new(manifest.groups);
    if chains.len() != partition.m() || manifest.weights.len() != partition.m() {
        return Err(Error::Format("manifest group, adapter and weight counts disagree".into()));
    }
    Ok(EnsembleModel {
        partition,
        chains,
        eta: manifest.eta,
        weights: manifest.weights,
        trace: manifest.trace,
        routing: manifest.routing,
    })
}
