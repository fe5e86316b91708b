//! A small differentiable model family with synthetic multitask data.
//!
//! The harness supplies what real fine-tuning would: exact per-sample
//! gradients at the base weights, brute-force fine-tuned ground truth, and
//! the metrics used to judge the estimator against it.

pub mod bruteforce;
pub mod gradients;
pub mod hessian;
pub mod ledger;
pub mod metrics;
pub mod model;
pub mod synth;

pub use bruteforce::{finetune_bruteforce, finetune_many, BruteForceParams, BruteForceResult};
pub use gradients::{compute_gradients, compute_projected_gradients};
pub use hessian::{hessian_trace, HessianTarget, TraceEstimate};
pub use ledger::{speedup_report, FlopLedger, LedgerSnapshot, Phase};
pub use model::{HarnessModel, ModelKind};
pub use synth::{generate_tasks, Example, HarnessTask, SyntheticTaskSpec};
