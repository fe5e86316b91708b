//! Task affinity estimation and adapter ensembles from base-model gradients.
//!
//! The pipeline starts from per-sample gradients of a frozen base model
//! (see [`store`]), compresses them with a Gaussian random projection
//! ([`projection`]), and fits linearized surrogates of fine-tuning on
//! arbitrary task subsets ([`probe`]). Subset estimates are aggregated into a
//! task-affinity matrix ([`affinity`]), tasks are grouped by an SDP relaxation
//! of the average-density clustering objective ([`cluster`]), and one adapter
//! chain per group is fitted and refined by boosting ([`ensemble`]).
//!
//! [`harness`] contains a tiny differentiable model family that provides
//! exact gradients and brute-force fine-tuning ground truth for all of the
//! above, together with the evaluation metrics.

pub mod affinity;
pub mod cluster;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod optim;
pub mod probe;
pub mod projection;
pub mod store;

pub use error::{Error, Result};
