//! Per-sample gradients of a harness model at its base weights.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::ledger::{FlopLedger, Phase};
use super::model::HarnessModel;
use super::synth::{Example, HarnessTask};
use crate::error::{Error, Result};
use crate::projection::ProjectionMatrix;
use crate::store::{GradientStore, SampleRecord, Split, StoreHeader};

fn examples(tasks: &[HarnessTask]) -> Vec<(u32, Split, &Example)> {
    tasks
        .iter()
        .flat_map(|t| {
            t.train
                .iter()
                .map(move |e| (t.task_id, Split::Train, e))
                .chain(t.validation.iter().map(move |e| (t.task_id, Split::Validation, e)))
        })
        .collect()
}

fn record(model: &HarnessModel, task_id: u32, split: Split, e: &Example) -> SampleRecord {
    let (h, g) = model.output_and_gradient(&model.theta_star, &e.input);
    SampleRecord {
        sample_id: e.sample_id,
        task_id,
        split,
        label: e.label,
        base_output: h,
        gradient: g,
        weight: e.weight,
    }
}

fn check_inputs(model: &HarnessModel, tasks: &[HarnessTask]) -> Result<()> {
    for (i, t) in tasks.iter().enumerate() {
        if t.task_id as usize != i {
            return Err(Error::arg(format!("task at position {i} has id {}", t.task_id)));
        }
        for e in t.train.iter().chain(&t.validation) {
            if e.input.len() != model.input_dim {
                return Err(Error::arg(format!(
                    "sample {} has {} features, model expects {}",
                    e.sample_id,
                    e.input.len(),
                    model.input_dim
                )));
            }
        }
    }
    Ok(())
}

fn names(tasks: &[HarnessTask]) -> BTreeMap<u32, String> {
    tasks.iter().map(|t| (t.task_id, t.name.clone())).collect()
}

/// Exact gradients `dh/dtheta` at `theta*` for every sample; one forward and
/// one backward pass per sample.
pub fn compute_gradients(model: &HarnessModel, tasks: &[HarnessTask], ledger: &FlopLedger) -> Result<GradientStore> {
    check_inputs(model, tasks)?;
    let items = examples(tasks);
    let records: Vec<SampleRecord> = items.par_iter().map(|(t, s, e)| record(model, *t, *s, e)).collect();
    ledger.add_forward(Phase::Gradients, records.len() as u64);
    ledger.add_backward(Phase::Gradients, records.len() as u64);
    let header = StoreHeader::raw(tasks.len() as u64, records.len() as u64, model.p() as u64, 2);
    GradientStore::from_records(header, records, &names(tasks))
}

/// Like [`compute_gradients`] followed by projection, but never holds more
/// than `chunk` full-dimension gradients at once.
pub fn compute_projected_gradients(
    model: &HarnessModel,
    tasks: &[HarnessTask],
    projection: &ProjectionMatrix,
    ledger: &FlopLedger,
    chunk: usize,
) -> Result<GradientStore> {
    check_inputs(model, tasks)?;
    if projection.source_dim() != model.p() {
        return Err(Error::arg(format!(
            "projection source dimension {} != model parameter count {}",
            projection.source_dim(),
            model.p()
        )));
    }
    let items = examples(tasks);
    let mut records = Vec::with_capacity(items.len());
    for block in items.chunks(chunk.max(1)) {
        let mut part: Vec<SampleRecord> = block.par_iter().map(|(t, s, e)| record(model, *t, *s, e)).collect();
        ledger.add_forward(Phase::Gradients, part.len() as u64);
        ledger.add_backward(Phase::Gradients, part.len() as u64);
        projection.project_records(&mut part)?;
        records.extend(part);
    }
    let header = StoreHeader {
        projected: !projection.is_identity() || projection.target_dim() != model.p(),
        projection_seed: projection.seed(),
        ..StoreHeader::raw(tasks.len() as u64, records.len() as u64, projection.target_dim() as u64, 2)
    };
    GradientStore::from_records(header, records, &names(tasks))
}
