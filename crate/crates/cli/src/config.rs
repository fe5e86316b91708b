//! Run configuration: one JSON document with explicit seeds.
//!
//! Every component seed is optional. Missing seeds are derived from the
//! master `seed`, and the resolved configuration (all seeds filled in) is
//! what gets written to the run directory and hashed.

use std::fs;
use std::path::{Path, PathBuf};

use ae_core::affinity::{DEFAULT_SUBSETS, DEFAULT_SUBSET_SIZE};
use ae_core::ensemble::{EnsembleParams, Routing, DEFAULT_ETA};
use ae_core::harness::bruteforce::BruteForceParams;
use ae_core::harness::model::DEFAULT_MLP_HIDDEN;
use ae_core::harness::{ModelKind, SyntheticTaskSpec};
use ae_core::probe::{Metric, ProbeParams};
use ae_core::projection::DEFAULT_DIM;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; component seeds default to values derived from it.
    pub seed: u64,
    /// Precomputed gradient store. Exactly one of `store` and `harness` is required.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    /// Output directory, overridden by `--out`. Never part of the config hash.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harness: Option<HarnessConfig>,
    pub projection: ProjectionConfig,
    pub plan: PlanConfig,
    pub probe: ProbeConfig,
    pub cluster: ClusterConfig,
    pub ensemble: EnsembleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            store: None,
            out_dir: None,
            harness: None,
            projection: ProjectionConfig::default(),
            plan: PlanConfig::default(),
            probe: ProbeConfig::default(),
            cluster: ClusterConfig::default(),
            ensemble: EnsembleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub model: ModelConfig,
    /// Synthetic data. Its `seed` field is replaced by `data_seed`.
    pub tasks: SyntheticTaskSpec,
    pub data_seed: Option<u64>,
    pub model_seed: Option<u64>,
    pub bruteforce: BruteForceParams,
    /// Brute-force fine-tune the planned subsets during `eval`.
    pub ground_truth: bool,
    /// Limit ground truth to the first N planned subsets (all when absent).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_subsets: Option<usize>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            model: ModelConfig::default(),
            tasks: SyntheticTaskSpec::default(),
            data_seed: None,
            model_seed: None,
            bruteforce: BruteForceParams::default(),
            ground_truth: true,
            truth_subsets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden width for `mlp1`.
    pub hidden: usize,
    /// Scale of the output layer (`mlp1`) or of all weights (`linear`).
    pub scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { kind: ModelKind::Linear, hidden: DEFAULT_MLP_HIDDEN, scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    /// Target dimension; absent, or at least the parameter count, means identity.
    pub dim: Option<usize>,
    pub seed: Option<u64>,
    /// Gradients projected per batch when `fused`.
    pub chunk: usize,
    /// Project harness gradients as they are computed instead of writing
    /// the full-dimension store first.
    pub fused: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { dim: Some(DEFAULT_DIM), seed: None, chunk: 512, fused: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub subsets: usize,
    pub size: usize,
    pub seed: Option<u64>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig { subsets: DEFAULT_SUBSETS, size: DEFAULT_SUBSET_SIZE, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub metric: Metric,
    pub l2_reg: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let p = ProbeParams::default();
        ProbeConfig { metric: Metric::ValAccuracy, l2_reg: p.l2_reg, tol: p.tol, max_iter: p.max_iter }
    }
}

impl ProbeConfig {
    pub fn params(&self) -> ProbeParams {
        ProbeParams { l2_reg: self.l2_reg, tol: self.tol, max_iter: self.max_iter }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Trace weights to sweep; absent means the spread-scaled default grid.
    pub lambda_candidates: Option<Vec<f64>>,
    /// Rounding threshold numerator: entries above `c / n` link two tasks.
    pub c: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { lambda_candidates: None, c: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Adapters fit by logistic regression on projected gradients.
    #[default]
    Probe,
    /// Adapters fine-tuned by brute force on the harness (identity projection only).
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub eta: f64,
    pub max_boost_steps: usize,
    pub min_rel_improvement: f64,
    pub routing: Routing,
    /// Ridge weight of stage-0 adapters; defaults to `probe.l2_reg`.
    pub stage0_l2: Option<f64>,
    /// Ridge weight of boosting stages; defaults to `probe.l2_reg`.
    pub residual_l2: Option<f64>,
    pub weight_iters: usize,
    pub backend: Backend,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let p = EnsembleParams::default();
        EnsembleConfig {
            eta: DEFAULT_ETA,
            max_boost_steps: p.max_boost_steps,
            min_rel_improvement: p.min_rel_improvement,
            routing: Routing::ByTask,
            stage0_l2: None,
            residual_l2: None,
            weight_iters: p.weight_iters,
            backend: Backend::Probe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rademacher probes for the sharpness estimate; 0 skips sharpness.
    pub hessian_probes: usize,
    /// Training points per group for the max-over-points trace.
    pub hessian_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { hessian_probes: 100, hessian_samples: 20 }
    }
}

fn derive_seed(master: u64, component: u64) -> u64 {
    master.wrapping_mul(1_000_003).wrapping_add(component)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Fills every unset component seed from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.projection.seed.get_or_insert(derive_seed(c.seed, 1));
        c.plan.seed.get_or_insert(derive_seed(c.seed, 2));
        if let Some(h) = c.harness.as_mut() {
            let data = *h.data_seed.get_or_insert(derive_seed(c.seed, 3));
            h.model_seed.get_or_insert(derive_seed(c.seed, 4));
            h.tasks.seed = data;
        }
        c.ensemble.stage0_l2.get_or_insert(c.probe.l2_reg);
        c.ensemble.residual_l2.get_or_insert(c.probe.l2_reg);
        c
    }

    /// Replaces the master seed and clears derived component seeds.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.projection.seed = None;
        c.plan.seed = None;
        if let Some(h) = c.harness.as_mut() {
            h.data_seed = None;
            h.model_seed = None;
        }
        c
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        match (&self.store, &self.harness) {
            (None, None) => return bad("config needs either a `store` path or a `harness` section".into()),
            (Some(_), Some(_)) => return bad("`store` and `harness` are mutually exclusive".into()),
            (Some(p), None) if !p.is_file() => return bad(format!("store {} does not exist", p.display())),
            _ => {}
        }
        if let Some(h) = &self.harness {
            h.tasks.validate().map_err(|e| CliError::Config(e.to_string()))?;
            if h.model.kind == ModelKind::Mlp1 && h.model.hidden == 0 {
                return bad("mlp1 needs a positive hidden width".into());
            }
            if !(h.model.scale.is_finite() && h.model.scale >= 0.0) {
                return bad("model scale must be finite and >= 0".into());
            }
            if self.plan.size > h.tasks.n_tasks {
                return bad(format!("subset size {} exceeds {} tasks", self.plan.size, h.tasks.n_tasks));
            }
        }
        if self.projection.dim == Some(0) {
            return bad("projection dimension must be positive".into());
        }
        if self.plan.subsets == 0 || self.plan.size == 0 {
            return bad("plan needs at least one subset of size >= 1".into());
        }
        if !(self.probe.l2_reg >= 0.0 && self.probe.tol > 0.0 && self.probe.max_iter > 0) {
            return bad("probe needs l2_reg >= 0, tol > 0 and max_iter > 0".into());
        }
        if let Some(ls) = &self.cluster.lambda_candidates {
            if ls.is_empty() || ls.iter().any(|l| !l.is_finite()) {
                return bad("lambda_candidates must be a nonempty list of finite numbers".into());
            }
        }
        if !(self.cluster.c >= 1.0) {
            return bad(format!("rounding constant c must be >= 1, got {}", self.cluster.c));
        }
        let e = &self.ensemble;
        if !(e.eta > 0.0 && e.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", e.eta));
        }
        if e.backend == Backend::Oracle && self.harness.is_none() {
            return bad("the oracle backend needs a harness".into());
        }
        Ok(())
    }

    pub fn ensemble_params(&self) -> EnsembleParams {
        let e = &self.ensemble;
        EnsembleParams {
            eta: e.eta,
            max_boost_steps: e.max_boost_steps,
            min_rel_improvement: e.min_rel_improvement,
            probe: ProbeParams { l2_reg: e.stage0_l2.unwrap_or(self.probe.l2_reg), ..self.probe.params() },
            residual_l2: e.residual_l2.unwrap_or(self.probe.l2_reg),
            weight_iters: e.weight_iters,
            routing: e.routing,
        }
    }

    /// Canonical JSON of the resolved config.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.resolved())? + "\n")
    }

    /// SHA-256 of [`Self::canonical_json`], hex encoded, first 16 characters.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}
