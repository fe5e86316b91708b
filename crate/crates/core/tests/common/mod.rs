//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ae_core::store::{GradientStore, SampleRecord, Split, StoreHeader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Binary store whose labels follow a planted linear rule per task group.
pub fn planted_store(n_tasks: u32, per_split: usize, dim: usize, groups: u32, seed: u64) -> GradientStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..groups).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let mut records = Vec::new();
    let mut id = 0u64;
    for t in 0..n_tasks {
        let w = &dirs[(t * groups / n_tasks) as usize];
        for split in [Split::Train, Split::Validation] {
            for _ in 0..per_split {
                let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let s: f64 = g.iter().zip(w).map(|(a, b)| a * b).sum();
                let flip = rng.random::<f64>() < 0.05;
                let label = if (s > 0.0) != flip { 1 } else { -1 };
                records.push(SampleRecord {
                    sample_id: id,
                    task_id: t,
                    split,
                    label,
                    base_output: 0.1 * rng.random::<f64>() - 0.05,
                    gradient: g,
                    weight: 1.0,
                });
                id += 1;
            }
        }
    }
    let header = StoreHeader::raw(n_tasks as u64, records.len() as u64, dim as u64, 2);
    GradientStore::from_records(header, records, &BTreeMap::new()).unwrap()
}
