//! Synthetic multitask binary classification with planted task groups.
//!
//! Every group `g` has a unit direction `w_g`; distinct groups meet at a fixed
//! angle. Inputs are standard Gaussian, labels are `sign(w_g^T s)` flipped
//! with the group's noise rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::Partition;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub n_tasks: usize,
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub input_dim: usize,
    pub n_groups: usize,
    /// Label flip probability, in `[0, 0.5)`.
    pub noise: f64,
    /// Angle between the directions of distinct groups, in degrees.
    pub angle_deg: f64,
    pub seed: u64,
    /// Appends a one-hot task indicator to every input.
    #[serde(default)]
    pub task_indicator: bool,
    /// Per-group noise rates overriding `noise`; empty means none.
    #[serde(default)]
    pub group_noise: Vec<f64>,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            n_tasks: 6,
            train_per_task: 60,
            val_per_task: 40,
            input_dim: 8,
            n_groups: 2,
            noise: 0.05,
            angle_deg: 90.0,
            seed: 0,
            task_indicator: false,
            group_noise: Vec::new(),
        }
    }
}

impl SyntheticTaskSpec {
    /// Length of each generated input vector.
    pub fn feature_dim(&self) -> usize {
        self.input_dim + if self.task_indicator { self.n_tasks } else { 0 }
    }

    /// Planted group of task `t`: tasks are split into contiguous blocks.
    pub fn group_of(&self, t: usize) -> usize {
        t * self.n_groups / self.n_tasks
    }

    fn noise_of(&self, g: usize) -> f64 {
        self.group_noise.get(g).copied().unwrap_or(self.noise)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.train_per_task == 0 || self.val_per_task == 0 || self.input_dim == 0 {
            return Err(Error::arg("synthetic spec needs positive task, sample and input counts"));
        }
        if self.n_groups == 0 || self.n_groups > self.n_tasks {
            return Err(Error::arg(format!("need 1 <= n_groups <= n_tasks, got {}", self.n_groups)));
        }
        if self.n_groups + 1 > self.input_dim {
            return Err(Error::arg("input_dim must exceed n_groups to place the group directions"));
        }
        for g in 0..self.n_groups {
            let r = self.noise_of(g);
            if !(0.0..0.5).contains(&r) {
                return Err(Error::arg(format!("noise rate {r} outside [0, 0.5)")));
            }
        }
        if !self.group_noise.is_empty() && self.group_noise.len() != self.n_groups {
            return Err(Error::arg("group_noise must list one rate per group"));
        }
        if !(0.0..=90.0).contains(&self.angle_deg) {
            return Err(Error::arg("angle_deg must lie in [0, 90]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub sample_id: u64,
    pub input: Vec<f64>,
    /// `+1` or `-1`.
    pub label: i32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessTask {
    pub task_id: u32,
    pub name: String,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

/// `n_groups + 1` orthonormal vectors by Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let c = dot(&v, b);
            axpy(-c, b, &mut v);
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            basis.push(v);
        }
    }
    basis
}

/// Unit group directions with pairwise cosine `cos(angle)`.
pub fn group_directions(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let basis = orthonormal(rng, spec.n_groups + 1, spec.input_dim);
    let cos = spec.angle_deg.to_radians().cos().max(0.0);
    let (a, b) = (cos.sqrt(), (1.0 - cos).sqrt());
    (0..spec.n_groups)
        .map(|g| basis[0].iter().zip(&basis[g + 1]).map(|(u0, ug)| a * u0 + b * ug).collect())
        .collect()
}

pub fn generate_tasks(spec: &SyntheticTaskSpec) -> Result<(Vec<HarnessTask>, Partition)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dirs = group_directions(spec, &mut rng);
    let mut next_id = 0u64;
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for t in 0..spec.n_tasks {
        let g = spec.group_of(t);
        let noise = spec.noise_of(g);
        let mut draw = |count: usize, rng: &mut ChaCha8Rng| -> Vec<Example> {
            (0..count)
                .map(|_| {
                    let mut input: Vec<f64> = (0..spec.input_dim).map(|_| StandardNormal.sample(rng)).collect();
                    let clean = if dot(&dirs[g], &input) >= 0.0 { 1 } else { -1 };
                    let label = if rng.random::<f64>() < noise { -clean } else { clean };
                    if spec.task_indicator {
                        input.extend((0..spec.n_tasks).map(|k| if k == t { 1.0 } else { 0.0 }));
                    }
                    let ex = Example { sample_id: next_id, input, label, weight: 1.0 };
                    next_id += 1;
                    ex
                })
                .collect()
        };
        let train = draw(spec.train_per_task, &mut rng);
        let validation = draw(spec.val_per_task, &mut rng);
        tasks.push(HarnessTask { task_id: t as u32, name: format!("task{t}"), train, validation });
    }
    let mut groups = vec![Vec::new(); spec.n_groups];
    for t in 0..spec.n_tasks {
        groups[spec.group_of(t)].push(t as u32);
    }
    Ok((tasks, Partition::new(groups)))
}
