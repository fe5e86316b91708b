//! Pipeline stages and their on-disk artifacts.
//!
//! Each stage reads its inputs from the run directory and writes its outputs
//! there, so any stage can be rerun on its own once its upstream artifacts
//! exist.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ae_core::affinity::{build_affinity, parse_matrix_csv, sample_subsets, SubsetPlan};
use ae_core::cluster::{default_candidates, select_num_groups, Candidate, Partition, PartitionFile};
use ae_core::ensemble::{
    finish_ensemble, fit_ensemble, fit_group_adapters, fit_group_adapters_oracle, load_ensemble, save_ensemble,
    task_accuracies, EnsembleModel, Routing,
};
use ae_core::harness::bruteforce::BruteForceResult;
use ae_core::harness::hessian::{mean_loss_hvp, top_eigenvalue};
use ae_core::harness::ledger::LedgerSnapshot;
use ae_core::harness::metrics::{finetune_distance, pearson, positive_transfer_rate, relative_error, relative_remainder, spearman, FKey};
use ae_core::harness::{
    compute_gradients, compute_projected_gradients, finetune_many, generate_tasks, hessian_trace, speedup_report, Example,
    FlopLedger, HarnessModel, HarnessTask, HessianTarget, ModelKind, Phase,
};
use ae_core::probe::{estimate_all, estimate_subset, Metric, SubsetEstimate};
use ae_core::projection::ProjectionMatrix;
use ae_core::store::{manifest_path, read_store, write_store_with_manifest, GradientStore, StoreManifest};
use serde::{Deserialize, Serialize};

use crate::config::{Backend, RunConfig};
use crate::error::{CliError, Result};

pub const CONFIG: &str = "config.json";
pub const TASKS: &str = "tasks.json";
pub const MODEL: &str = "model.json";
pub const PLANTED: &str = "planted.json";
pub const GRADS: &str = "grads.gfv1";
pub const PROJECTED: &str = "projected.gfv1";
pub const PROJECTION: &str = "projection.json";
pub const PLAN: &str = "plan.json";
pub const ESTIMATES: &str = "estimates.jsonl";
pub const AFFINITY: &str = "affinity.csv";
pub const AFFINITY_COUNTS: &str = "affinity_counts.csv";
pub const PARTITION: &str = "partition.json";
pub const SWEEP: &str = "cluster_sweep.csv";
pub const ENSEMBLE: &str = ae_core::ensemble::MANIFEST_FILE;
pub const METRICS: &str = "metrics.csv";
pub const TASK_METRICS: &str = "task_metrics.csv";
pub const F_TABLE: &str = "f_table.csv";
pub const SUMMARY: &str = "summary.json";
pub const LEDGER: &str = "ledger.json";
pub const FAILED: &str = "FAILED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Gen,
    Grads,
    Project,
    Estimate,
    Affinity,
    Cluster,
    Ensemble,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Gen,
        Stage::Grads,
        Stage::Project,
        Stage::Estimate,
        Stage::Affinity,
        Stage::Cluster,
        Stage::Ensemble,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Grads => "grads",
            Stage::Project => "project",
            Stage::Estimate => "estimate",
            Stage::Affinity => "affinity",
            Stage::Cluster => "cluster",
            Stage::Ensemble => "ensemble",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionInfo {
    pub identity: bool,
    pub seed: u64,
    pub source_dim: usize,
    pub target_dim: usize,
}

impl ProjectionInfo {
    fn of(p: &ProjectionMatrix) -> Self {
        ProjectionInfo { identity: p.is_identity(), seed: p.seed(), source_dim: p.source_dim(), target_dim: p.target_dim() }
    }

    pub fn matrix(&self) -> Result<ProjectionMatrix> {
        if self.identity {
            Ok(ProjectionMatrix::identity(self.source_dim))
        } else {
            Ok(ProjectionMatrix::gaussian(self.seed, self.source_dim, self.target_dim)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub n_tasks: usize,
    pub metric: Metric,
    pub m: usize,
    pub groups: Vec<Vec<u32>>,
    pub adapter_count: usize,
    pub metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// One row of the (subset, task) performance table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FRow {
    /// `plan` for sampled subsets, `singleton` for single-task baselines.
    pub kind: String,
    /// Space-separated task ids.
    pub subset: String,
    pub task: u32,
    pub estimate: f64,
    pub truth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: u32,
    pub name: String,
    pub group: usize,
    pub acc_by_task: f64,
    pub acc_blended: f64,
    pub acc_global: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetricRow {
    metric: String,
    value: f64,
    config_hash: String,
    seed: u64,
}

pub fn subset_key(s: &[u32]) -> String {
    s.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn parse_subset_key(s: &str) -> Result<Vec<u32>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| CliError::Stage(format!("bad subset `{s}`"))))
        .collect()
}

/// Converts a metric value to a loss (lower is better).
pub fn as_loss(v: f64, metric: Metric) -> f64 {
    match metric {
        Metric::ValAccuracy => 1.0 - v,
        Metric::ValLoss => v,
    }
}

/// Positive transfer rate from an f table, on estimates or on ground truth.
pub fn transfer_rate_from_rows(rows: &[FRow], metric: Metric, truth: bool) -> Result<Option<f64>> {
    let value = |r: &FRow| if truth { r.truth } else { Some(r.estimate) };
    let mut singles = BTreeMap::new();
    for r in rows.iter().filter(|r| r.kind == "singleton") {
        match value(r) {
            Some(v) => {
                singles.entry(r.task).or_insert(as_loss(v, metric));
            }
            None => return Ok(None),
        }
    }
    let mut order: Vec<String> = Vec::new();
    let mut maps: Vec<BTreeMap<u32, f64>> = Vec::new();
    let mut subsets = Vec::new();
    let mut last: Option<String> = None;
    for r in rows.iter().filter(|r| r.kind == "plan") {
        let Some(v) = value(r) else { continue };
        // Consecutive rows with the same key belong to one planned subset.
        if last.as_deref() != Some(r.subset.as_str()) || maps.last().is_some_and(|m| m.contains_key(&r.task)) {
            order.push(r.subset.clone());
            subsets.push(parse_subset_key(&r.subset)?);
            maps.push(BTreeMap::new());
            last = Some(r.subset.clone());
        }
        maps.last_mut().unwrap().insert(r.task, as_loss(v, metric));
    }
    if subsets.is_empty() {
        return Ok(None);
    }
    Ok(Some(positive_transfer_rate(&subsets, &maps, &singles)?))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Stage(format!("csv: {e}"))
}

/// A run directory bound to a resolved configuration.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    /// Validates `cfg`, creates `dir` and writes the resolved config there.
    pub fn create(cfg: &RunConfig, dir: &Path) -> Result<Run> {
        cfg.validate()?;
        fs::create_dir_all(dir)?;
        let resolved = cfg.resolved();
        fs::write(dir.join(CONFIG), resolved.canonical_json()?)?;
        Ok(Run { cfg: resolved, dir: dir.to_path_buf() })
    }

    /// Reopens a run directory using the config stored in it.
    pub fn open(dir: &Path) -> Result<Run> {
        let path = dir.join(CONFIG);
        if !path.is_file() {
            return Err(CliError::Missing(vec![path.display().to_string()]));
        }
        let cfg = RunConfig::load(&path)?;
        cfg.validate()?;
        Ok(Run { cfg: cfg.resolved(), dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, names: &[&str]) -> Result<()> {
        let missing: Vec<String> = names.iter().filter(|n| !self.path(n).exists()).map(|n| n.to_string()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CliError::Missing(missing))
        }
    }

    /// Stages that `run` executes, in order, optionally stopping after `until`.
    pub fn plan_stages(&self, until: Option<Stage>) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| *s != Stage::Gen || self.cfg.harness.is_some())
            .filter(|s| until.is_none_or(|u| *s <= u))
            .collect()
    }

    /// Runs `stages` in order. On failure a `FAILED` marker holding the error
    /// is written and artifacts produced so far are kept.
    pub fn execute(&self, stages: &[Stage]) -> Result<()> {
        let marker = self.path(FAILED);
        if marker.exists() {
            fs::remove_file(&marker)?;
        }
        for &s in stages {
            log::info!("stage {s}");
            if let Err(e) = self.stage(s) {
                let _ = fs::write(&marker, format!("stage {s} failed: {e}\n"));
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn stage(&self, s: Stage) -> Result<()> {
        match s {
            Stage::Gen => self.gen(),
            Stage::Grads => self.grads(),
            Stage::Project => self.project(),
            Stage::Estimate => self.estimate(),
            Stage::Affinity => self.affinity(),
            Stage::Cluster => self.cluster(),
            Stage::Ensemble => self.ensemble(),
            Stage::Eval => self.eval(),
        }
    }

    // -- harness helpers ---------------------------------------------------

    fn harness_model(&self) -> Result<HarnessModel> {
        self.require(&[MODEL])?;
        read_json(&self.path(MODEL))
    }

    fn harness_tasks(&self) -> Result<Vec<HarnessTask>> {
        self.require(&[TASKS])?;
        read_json(&self.path(TASKS))
    }

    fn projection_for(&self, p: usize) -> Result<ProjectionMatrix> {
        match self.cfg.projection.dim {
            Some(d) if d < p => Ok(ProjectionMatrix::gaussian(self.cfg.projection.seed.unwrap_or(0), p, d)?),
            Some(d) => {
                log::info!("projection dimension {d} >= parameter count {p}; using the identity");
                Ok(ProjectionMatrix::identity(p))
            }
            None => Ok(ProjectionMatrix::identity(p)),
        }
    }

    fn load_ledgers(&self) -> Result<BTreeMap<String, LedgerSnapshot>> {
        let path = self.path(LEDGER);
        if path.is_file() {
            read_json(&path)
        } else {
            Ok(BTreeMap::new())
        }
    }

    fn save_ledger(&self, stage: Stage, ledger: &FlopLedger) -> Result<()> {
        let mut all = self.load_ledgers()?;
        all.insert(stage.name().to_string(), ledger.snapshot());
        write_json(&self.path(LEDGER), &all)
    }

    fn task_names(&self, n: usize) -> Vec<String> {
        let path = manifest_path(&self.path(PROJECTED));
        let manifest: StoreManifest = read_json(&path).unwrap_or_default();
        (0..n as u32).map(|t| manifest.tasks.get(&t).cloned().unwrap_or_else(|| format!("task{t}"))).collect()
    }

    // -- stages ----------------------------------------------------------

    fn gen(&self) -> Result<()> {
        let Some(h) = &self.cfg.harness else {
            log::info!("no harness configured; nothing to generate");
            return Ok(());
        };
        let (tasks, planted) = generate_tasks(&h.tasks)?;
        let input = h.tasks.feature_dim();
        let seed = h.model_seed.unwrap_or(0);
        let model = match h.model.kind {
            ModelKind::Linear => HarnessModel::linear_random(input, h.model.scale, seed),
            ModelKind::Mlp1 => HarnessModel::mlp1_random(input, h.model.hidden, h.model.scale, seed),
        };
        write_json(&self.path(TASKS), &tasks)?;
        write_json(&self.path(MODEL), &model)?;
        write_json(&self.path(PLANTED), &planted.groups)?;
        Ok(())
    }

    fn grads(&self) -> Result<()> {
        if self.cfg.harness.is_none() {
            log::info!("using the external store; no gradients to compute");
            return Ok(());
        }
        let model = self.harness_model()?;
        let tasks = self.harness_tasks()?;
        let ledger = FlopLedger::new();
        if self.cfg.projection.fused {
            let proj = self.projection_for(model.p())?;
            let store = compute_projected_gradients(&model, &tasks, &proj, &ledger, self.cfg.projection.chunk)?;
            write_store_with_manifest(&store, &self.path(PROJECTED))?;
            write_json(&self.path(PROJECTION), &ProjectionInfo::of(&proj))?;
        } else {
            let store = compute_gradients(&model, &tasks, &ledger)?;
            write_store_with_manifest(&store, &self.path(GRADS))?;
        }
        self.save_ledger(Stage::Grads, &ledger)
    }

    fn project(&self) -> Result<()> {
        if self.cfg.harness.is_some() && self.cfg.projection.fused {
            return self.require(&[PROJECTED, PROJECTION]);
        }
        let src = match &self.cfg.store {
            Some(p) => p.clone(),
            None => {
                self.require(&[GRADS])?;
                self.path(GRADS)
            }
        };
        let store = read_store(&src)?;
        let (out, info) = if store.header.projected {
            log::warn!("{} is already projected; passing it through", src.display());
            let info = ProjectionInfo {
                identity: true,
                seed: store.header.projection_seed,
                source_dim: store.dim(),
                target_dim: store.dim(),
            };
            (store, info)
        } else {
            let proj = self.projection_for(store.dim())?;
            let info = ProjectionInfo::of(&proj);
            let out = if proj.is_identity() { store } else { proj.project_store(&store)? };
            (out, info)
        };
        write_store_with_manifest(&out, &self.path(PROJECTED))?;
        write_json(&self.path(PROJECTION), &info)
    }

    fn projected_store(&self) -> Result<GradientStore> {
        self.require(&[PROJECTED])?;
        Ok(read_store(&self.path(PROJECTED))?)
    }

    fn estimate(&self) -> Result<()> {
        let store = self.projected_store()?;
        let plan_cfg = &self.cfg.plan;
        let plan = sample_subsets(store.n_tasks(), plan_cfg.subsets, plan_cfg.size, plan_cfg.seed.unwrap_or(0))?;
        if !plan.uncovered_pairs.is_empty() {
            log::warn!("{} task pairs never co-occur in the plan", plan.uncovered_pairs.len());
        }
        write_json(&self.path(PLAN), &plan)?;
        let params = self.cfg.probe.params();
        let results = estimate_all(&plan.subsets, &store, self.cfg.probe.metric, &params)?;
        let ledger = FlopLedger::new();
        let d = store.dim() as u64;
        let mut lines = String::new();
        let mut unconverged = 0;
        for (est, sol) in &results {
            let (mut train, mut val) = (0u64, 0u64);
            for &t in &est.subset {
                let task = store.task(t)?;
                train += task.train.len() as u64;
                val += task.validation.len() as u64;
            }
            ledger.add_regression(Phase::Estimation, sol.evaluations as u64, train, d);
            ledger.add_regression(Phase::Estimation, 1, val, d);
            if !sol.converged {
                unconverged += 1;
            }
            lines.push_str(&est.to_json_line()?);
            lines.push('\n');
        }
        if unconverged > 0 {
            log::warn!("{unconverged} subset regressions stopped before reaching the gradient tolerance");
        }
        fs::write(self.path(ESTIMATES), lines)?;
        self.save_ledger(Stage::Estimate, &ledger)
    }

    fn read_plan_and_estimates(&self) -> Result<(SubsetPlan, Vec<SubsetEstimate>)> {
        self.require(&[PLAN, ESTIMATES])?;
        let plan: SubsetPlan = read_json(&self.path(PLAN))?;
        let estimates = fs::read_to_string(self.path(ESTIMATES))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(CliError::from))
            .collect::<Result<Vec<SubsetEstimate>>>()?;
        Ok((plan, estimates))
    }

    fn affinity(&self) -> Result<()> {
        let (plan, estimates) = self.read_plan_and_estimates()?;
        let aff = build_affinity(&plan, &estimates)?;
        let names = self.task_names(plan.n);
        fs::write(self.path(AFFINITY), aff.to_csv(&names)?)?;
        fs::write(self.path(AFFINITY_COUNTS), aff.counts_csv(&names)?)?;
        Ok(())
    }

    fn cluster(&self) -> Result<()> {
        self.require(&[AFFINITY])?;
        let (_, t) = parse_matrix_csv(&fs::read_to_string(self.path(AFFINITY))?)?;
        let n = t.len();
        let t_sym: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| 0.5 * (t[i][j] + t[j][i])).collect()).collect();
        let c = self.cfg.cluster.c;
        let candidates: Vec<Candidate> = match &self.cfg.cluster.lambda_candidates {
            Some(ls) => ls.iter().map(|&l| Candidate { lambda_reg: l, c }).collect(),
            None => default_candidates(&t_sym).into_iter().map(|k| Candidate { c, ..k }).collect(),
        };
        let sel = select_num_groups(&t_sym, &candidates)?;
        let ledger = FlopLedger::new();
        ledger.add_eigendecompositions(Phase::Clustering, sel.eigendecompositions as u64);
        write_json(&self.path(PARTITION), &sel.to_file())?;

        #[derive(Serialize)]
        struct SweepRow {
            lambda_reg: f64,
            c: f64,
            m: usize,
            score: f64,
            groups: String,
        }
        let rows: Vec<SweepRow> = sel
            .sweep
            .iter()
            .map(|(cand, part, score)| SweepRow {
                lambda_reg: cand.lambda_reg,
                c: cand.c,
                m: part.m(),
                score: *score,
                groups: part.groups.iter().map(|g| subset_key(g)).collect::<Vec<_>>().join(" | "),
            })
            .collect();
        write_csv(&self.path(SWEEP), &rows)?;
        self.save_ledger(Stage::Cluster, &ledger)
    }

    fn partition(&self) -> Result<Partition> {
        self.require(&[PARTITION])?;
        let pf: PartitionFile = read_json(&self.path(PARTITION))?;
        Ok(Partition::new(pf.groups))
    }

    fn ensemble(&self) -> Result<()> {
        let store = self.projected_store()?;
        let partition = self.partition()?;
        let params = self.cfg.ensemble_params();
        let model = match self.cfg.ensemble.backend {
            Backend::Probe => fit_ensemble(&partition, &store, &params)?,
            Backend::Oracle => {
                let h = self.cfg.harness.as_ref().expect("validated");
                let hm = self.harness_model()?;
                let tasks = self.harness_tasks()?;
                let ledger = FlopLedger::new();
                let bf = ae_core::harness::BruteForceParams { metric: self.cfg.probe.metric, ..h.bruteforce };
                let adapters = fit_group_adapters_oracle(&partition, &store, &hm, &tasks, &bf, &ledger)?;
                self.save_ledger(Stage::Ensemble, &ledger)?;
                finish_ensemble(&partition, adapters, &store, &params)?
            }
        };
        for step in model.trace.iter().filter(|s| s.stage.is_none()) {
            log::warn!("boosting stage on group {} rejected: {}", step.group, step.note.as_deref().unwrap_or(""));
        }
        save_ensemble(&model, &self.dir)?;
        Ok(())
    }

    fn eval(&self) -> Result<()> {
        self.require(&[ENSEMBLE, PLAN, ESTIMATES])?;
        let store = self.projected_store()?;
        let model = load_ensemble(&self.dir)?;
        let (plan, estimates) = self.read_plan_and_estimates()?;
        let metric = self.cfg.probe.metric;
        let n = store.n_tasks();
        let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
        let mut warnings = Vec::new();

        // Per-task accuracy of the ensemble against one global adapter.
        let by_task = task_accuracies(&model, &store, Routing::ByTask)?;
        let blended = task_accuracies(&model, &store, Routing::Blended)?;
        let single = Partition::single(n);
        let global_adapters = fit_group_adapters(&single, &store, &self.cfg.ensemble_params().probe)?;
        let global = EnsembleModel::new(single, global_adapters, model.eta, Routing::ByTask)?;
        let global_acc = task_accuracies(&global, &store, Routing::ByTask)?;
        let names = self.task_names(n);
        let task_rows: Vec<TaskRow> = by_task
            .keys()
            .map(|&t| TaskRow {
                task: t,
                name: names[t as usize].clone(),
                group: model.partition.group_of(t).unwrap_or(usize::MAX),
                acc_by_task: by_task[&t],
                acc_blended: blended[&t],
                acc_global: global_acc[&t],
            })
            .collect();
        write_csv(&self.path(TASK_METRICS), &task_rows)?;
        let mean = |m: &BTreeMap<u32, f64>| m.values().sum::<f64>() / m.len().max(1) as f64;
        metrics.insert("mean_acc_by_task".into(), mean(&by_task));
        metrics.insert("mean_acc_blended".into(), mean(&blended));
        metrics.insert("mean_acc_global".into(), mean(&global_acc));
        metrics.insert("ensemble_gain_points".into(), 100.0 * (mean(&by_task) - mean(&global_acc)));
        metrics.insert("groups".into(), model.m() as f64);
        metrics.insert("adapters".into(), model.adapter_count() as f64);
        metrics.insert("boosting_stages".into(), model.accepted_stages() as f64);

        // f table: planned subsets plus singleton baselines.
        let params = self.cfg.probe.params();
        let singles: Vec<SubsetEstimate> =
            (0..n as u32).map(|t| estimate_subset(&[t], &store, metric, &params)).collect::<ae_core::Result<_>>()?;
        let mut rows: Vec<FRow> = Vec::new();
        for e in &estimates {
            for (&t, &v) in &e.scores {
                rows.push(FRow { kind: "plan".into(), subset: subset_key(&e.subset), task: t, estimate: v, truth: None });
            }
        }
        for e in &singles {
            for (&t, &v) in &e.scores {
                rows.push(FRow { kind: "singleton".into(), subset: subset_key(&e.subset), task: t, estimate: v, truth: None });
            }
        }

        let ledgers = self.load_ledgers()?;
        let eval_ledger = FlopLedger::new();
        if let Some(h) = &self.cfg.harness {
            let hm = self.harness_model()?;
            let tasks = self.harness_tasks()?;
            let planted: Vec<Vec<u32>> = read_json(&self.path(PLANTED))?;
            metrics.insert("partition_matches_planted".into(), (Partition::new(planted) == model.partition) as u8 as f64);

            if h.ground_truth {
                let bf = ae_core::harness::BruteForceParams { metric, ..h.bruteforce };
                let k = h.truth_subsets.unwrap_or(plan.subsets.len()).min(plan.subsets.len());
                let plan_ledger = FlopLedger::new();
                let truths = finetune_many(&hm, &tasks, &plan.subsets[..k], &bf, &plan_ledger)?;
                let singleton_sets: Vec<Vec<u32>> = (0..n as u32).map(|t| vec![t]).collect();
                let single_truths = finetune_many(&hm, &tasks, &singleton_sets, &bf, &eval_ledger)?;
                fill_truth(&mut rows, &truths, &single_truths);
                let (est, tru): (BTreeMap<FKey, f64>, BTreeMap<FKey, f64>) = truth_pairs(&estimates[..k], &truths);
                let ev: Vec<f64> = est.values().copied().collect();
                let tv: Vec<f64> = tru.values().copied().collect();
                metrics.insert("relative_error".into(), relative_error(&est, &tru)?);
                match (spearman(&ev, &tv), pearson(&ev, &tv)) {
                    (Ok(s), Ok(p)) => {
                        metrics.insert("spearman".into(), s);
                        metrics.insert("pearson".into(), p);
                    }
                    _ => warnings.push("correlation undefined: constant estimates or truths".into()),
                }
                if let Some(r) = transfer_rate_from_rows(&rows, metric, true)? {
                    metrics.insert("transfer_rate_truth".into(), r);
                }
                let bf_snap = plan_ledger.snapshot();
                if k == plan.subsets.len() {
                    let mut est_snap = LedgerSnapshot::default();
                    for stage in [Stage::Grads, Stage::Estimate] {
                        if let Some(s) = ledgers.get(stage.name()) {
                            est_snap = est_snap.merged(s);
                        }
                    }
                    match speedup_report(&est_snap, &bf_snap, hm.p()) {
                        Ok(s) => {
                            metrics.insert("speedup".into(), s);
                        }
                        Err(e) => warnings.push(format!("speedup unavailable: {e}")),
                    }
                    if let Some(g) = ledgers.get(Stage::Grads.name()) {
                        metrics.insert(
                            "gradient_passes_per_sample".into(),
                            g.total.backward as f64 / store.header.n_samples as f64,
                        );
                    }
                }
                let merged = eval_ledger.snapshot().merged(&bf_snap);
                let ledger = FlopLedger::from_snapshot(&merged);
                self.save_ledger(Stage::Eval, &ledger)?;
            }

            if self.cfg.eval.hessian_probes > 0 {
                self.sharpness(&hm, &tasks, &model, &mut metrics)?;
            }
        }
        if let Some(r) = transfer_rate_from_rows(&rows, metric, false)? {
            metrics.insert("transfer_rate_estimate".into(), r);
        }
        write_csv(&self.path(F_TABLE), &rows)?;

        let hash = self.cfg.hash()?;
        let metric_rows: Vec<MetricRow> = metrics
            .iter()
            .map(|(k, v)| MetricRow { metric: k.clone(), value: *v, config_hash: hash.clone(), seed: self.cfg.seed })
            .collect();
        write_csv(&self.path(METRICS), &metric_rows)?;
        let summary = Summary {
            config_hash: hash,
            seed: self.cfg.seed,
            n_tasks: n,
            metric,
            m: model.m(),
            groups: model.partition.groups.clone(),
            adapter_count: model.adapter_count(),
            metrics,
            warnings,
        };
        write_json(&self.path(SUMMARY), &summary)
    }

    /// Loss-Hessian trace (max over training points) and the top eigenvalue of
    /// the mean-loss Hessian at each lifted stage-0 group adapter, with
    /// fine-tuning distance and Taylor remainder.
    fn sharpness(
        &self,
        hm: &HarnessModel,
        tasks: &[HarnessTask],
        model: &EnsembleModel,
        metrics: &mut BTreeMap<String, f64>,
    ) -> Result<()> {
        self.require(&[PROJECTION])?;
        let info: ProjectionInfo = read_json(&self.path(PROJECTION))?;
        let proj = info.matrix()?;
        let eval = &self.cfg.eval;
        for (j, chain) in model.chains.iter().enumerate() {
            let theta = if chain[0].x.len() == hm.p() && info.identity {
                chain[0].x.iter().zip(&hm.theta_star).map(|(a, b)| a + b).collect()
            } else {
                proj.lift(&chain[0].x, &hm.theta_star)?
            };
            let members = &model.partition.groups[j];
            let train: Vec<Example> =
                members.iter().flat_map(|&t| tasks[t as usize].train.iter().cloned()).take(eval.hessian_samples).collect();
            if train.is_empty() {
                continue;
            }
            let tr = hessian_trace(hm, &theta, &train, HessianTarget::MaxOverPoints, eval.hessian_probes, self.cfg.seed)?;
            metrics.insert(format!("sharpness_hutchinson_g{j}"), tr.hutchinson);
            if let Some(x) = tr.exact {
                metrics.insert(format!("sharpness_exact_g{j}"), x);
            }
            let top = top_eigenvalue(|v| mean_loss_hvp(hm, &theta, &train, v), hm.p(), 100, self.cfg.seed)?;
            metrics.insert(format!("sharpness_top_eigenvalue_g{j}"), top);
            metrics.insert(format!("finetune_distance_g{j}"), finetune_distance(&theta, &hm.theta_star, hm.full_norm)?);
            let inputs: Vec<&[f64]> =
                members.iter().flat_map(|&t| tasks[t as usize].validation.iter().map(|e| e.input.as_slice())).collect();
            metrics.insert(format!("taylor_remainder_g{j}"), relative_remainder(hm, &theta, &inputs)?);
        }
        Ok(())
    }
}

fn fill_truth(rows: &mut [FRow], truths: &[BruteForceResult], singles: &[BruteForceResult]) {
    // Plan rows were emitted subset by subset in plan order.
    let mut plan_rows = rows.iter_mut().filter(|r| r.kind == "plan");
    for t in truths {
        for (&task, &v) in &t.scores {
            if let Some(r) = plan_rows.next() {
                debug_assert_eq!(r.task, task);
                r.truth = Some(v);
            }
        }
    }
    let by_task: BTreeMap<u32, f64> = singles.iter().flat_map(|s| s.scores.iter().map(|(&t, &v)| (t, v))).collect();
    for r in rows.iter_mut().filter(|r| r.kind == "singleton") {
        r.truth = by_task.get(&r.task).copied();
    }
}

/// Estimates and truths keyed by (subset, task). Repeated subsets are
/// disambiguated by appending their plan position to the key.
fn truth_pairs(estimates: &[SubsetEstimate], truths: &[BruteForceResult]) -> (BTreeMap<FKey, f64>, BTreeMap<FKey, f64>) {
    let mut est = BTreeMap::new();
    let mut tru = BTreeMap::new();
    for (pos, (e, t)) in estimates.iter().zip(truths).enumerate() {
        for (&task, &v) in &e.scores {
            if let Some(&f) = t.scores.get(&task) {
                let mut key = e.subset.clone();
                key.push(u32::MAX - pos as u32);
                est.insert((key.clone(), task), v);
                tru.insert((key, task), f);
            }
        }
    }
    (est, tru)
}
