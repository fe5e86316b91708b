//! Operation counters for comparing estimation against brute-force
//! fine-tuning.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Gradients,
    Estimation,
    BruteForce,
    Clustering,
    Ensemble,
    Evaluation,
}

impl Phase {
    pub const ALL: [Phase; 6] =
        [Phase::Gradients, Phase::Estimation, Phase::BruteForce, Phase::Clustering, Phase::Ensemble, Phase::Evaluation];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Default)]
struct PhaseCounters {
    forward: AtomicU64,
    backward: AtomicU64,
    regression_evals: AtomicU64,
    regression_work: AtomicU64,
    eigendecompositions: AtomicU64,
}

/// Monotone, thread-safe counters partitioned by pipeline phase.
#[derive(Debug, Default)]
pub struct FlopLedger {
    phases: [PhaseCounters; 6],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub forward: u64,
    pub backward: u64,
    /// Objective/gradient evaluations of surrogate regressions.
    pub regression_evals: u64,
    /// Sum over regressions of `evaluations * samples * d`.
    pub regression_work: u64,
    pub eigendecompositions: u64,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.forward += o.forward;
        self.backward += o.backward;
        self.regression_evals += o.regression_evals;
        self.regression_work += o.regression_work;
        self.eigendecompositions += o.eigendecompositions;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub phases: BTreeMap<Phase, Counts>,
    pub total: Counts,
}

impl LedgerSnapshot {
    /// Phase-wise sum of two snapshots.
    pub fn merged(&self, other: &LedgerSnapshot) -> LedgerSnapshot {
        let mut out = self.clone();
        for (phase, c) in &other.phases {
            out.phases.entry(*phase).or_default().add(c);
        }
        out.total.add(&other.total);
        out
    }
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn at(&self, phase: Phase) -> &PhaseCounters {
        &self.phases[phase.index()]
    }

    pub fn add_forward(&self, phase: Phase, n: u64) {
        self.at(phase).forward.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_backward(&self, phase: Phase, n: u64) {
        self.at(phase).backward.fetch_add(n, Ordering::Relaxed);
    }

    /// Records one regression that used `evals` objective evaluations over
    /// `samples` samples of dimension `d`.
    pub fn add_regression(&self, phase: Phase, evals: u64, samples: u64, d: u64) {
        let c = self.at(phase);
        c.regression_evals.fetch_add(evals, Ordering::Relaxed);
        c.regression_work.fetch_add(evals * samples * d, Ordering::Relaxed);
    }

    pub fn add_eigendecompositions(&self, phase: Phase, n: u64) {
        self.at(phase).eigendecompositions.fetch_add(n, Ordering::Relaxed);
    }

    /// A ledger whose counters start from `snap`, for resuming across runs.
    pub fn from_snapshot(snap: &LedgerSnapshot) -> Self {
        let ledger = FlopLedger::new();
        for (phase, c) in &snap.phases {
            let at = ledger.at(*phase);
            at.forward.store(c.forward, Ordering::Relaxed);
            at.backward.store(c.backward, Ordering::Relaxed);
            at.regression_evals.store(c.regression_evals, Ordering::Relaxed);
            at.regression_work.store(c.regression_work, Ordering::Relaxed);
            at.eigendecompositions.store(c.eigendecompositions, Ordering::Relaxed);
        }
        ledger
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let mut snap = LedgerSnapshot::default();
        for phase in Phase::ALL {
            let c = self.at(phase);
            let counts = Counts {
                forward: c.forward.load(Ordering::Relaxed),
                backward: c.backward.load(Ordering::Relaxed),
                regression_evals: c.regression_evals.load(Ordering::Relaxed),
                regression_work: c.regression_work.load(Ordering::Relaxed),
                eigendecompositions: c.eigendecompositions.load(Ordering::Relaxed),
            };
            snap.total.add(&counts);
            snap.phases.insert(phase, counts);
        }
        snap
    }
}

/// Cost of a ledger in model-pass units: forward plus backward passes, with
/// surrogate regressions converted at `regression_work / p`: one evaluation
/// over one sample costs `d / p` of a model pass.
pub fn pass_units(counts: &Counts, p: usize) -> f64 {
    (counts.forward + counts.backward) as f64 + counts.regression_work as f64 / p as f64
}

/// Brute-force cost divided by estimation cost, both in pass units.
pub fn speedup_report(estimation: &LedgerSnapshot, bruteforce: &LedgerSnapshot, p: usize) -> Result<f64> {
    if p == 0 {
        return Err(Error::arg("parameter count must be positive"));
    }
    let est = pass_units(&estimation.total, p);
    if est <= 0.0 {
        return Err(Error::arg("estimation ledger records no work"));
    }
    Ok(pass_units(&bruteforce.total, p) / est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rayon::prelude::*;

    #[test]
    fn concurrent_increments_are_not_lost() {
        let ledger = FlopLedger::new();
        (0..10_000u64).into_par_iter().for_each(|i| {
            ledger.add_forward(Phase::BruteForce, 1);
            ledger.add_backward(Phase::Gradients, 2);
            ledger.add_regression(Phase::Estimation, 1, i % 3, 2);
        });
        let s = ledger.snapshot();
        assert_eq!(s.phases[&Phase::BruteForce].forward, 10_000);
        assert_eq!(s.phases[&Phase::Gradients].backward, 20_000);
        assert_eq!(s.phases[&Phase::Estimation].regression_evals, 10_000);
        let work: u64 = (0..10_000u64).map(|i| (i % 3) * 2).sum();
        assert_eq!(s.phases[&Phase::Estimation].regression_work, work);
    }

    #[test]
    fn phases_sum_to_total() {
        let ledger = FlopLedger::new();
        ledger.add_forward(Phase::Gradients, 3);
        ledger.add_forward(Phase::Evaluation, 4);
        ledger.add_eigendecompositions(Phase::Clustering, 5);
        let s = ledger.snapshot();
        let mut sum = Counts::default();
        s.phases.values().for_each(|c| sum.add(c));
        assert_eq!(sum, s.total);
        assert_eq!(s.total.forward, 7);
    }

    #[test]
    fn speedup_baseline_and_errors() {
        let est = FlopLedger::new();
        est.add_forward(Phase::Gradients, 100);
        est.add_backward(Phase::Gradients, 100);
        let brute = FlopLedger::new();
        brute.add_forward(Phase::BruteForce, 100);
        brute.add_backward(Phase::BruteForce, 100);
        assert_eq!(speedup_report(&est.snapshot(), &brute.snapshot(), 10).unwrap(), 1.0);
        assert!(speedup_report(&FlopLedger::new().snapshot(), &brute.snapshot(), 10).is_err());
    }
}
