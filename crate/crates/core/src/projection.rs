//! Gaussian random projection of gradients from `p` to `d` dimensions.
//!
//! The `p x d` matrix `P` has i.i.d. `N(0, 1/d)` entries and is never stored:
//! column `k` is regenerated on demand from a ChaCha stream keyed by
//! `(seed, k)`, so projecting and lifting only need the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::store::{GradientStore, SampleRecord, StoreHeader};

/// Default target dimension.
pub const DEFAULT_DIM: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionMatrix {
    seed: u64,
    p: usize,
    d: usize,
    identity: bool,
}

impl ProjectionMatrix {
    pub fn gaussian(seed: u64, p: usize, d: usize) -> Result<Self> {
        if d == 0 || d > p {
            return Err(Error::arg(format!("projection needs 1 <= d <= p, got d={d}, p={p}")));
        }
        Ok(ProjectionMatrix { seed, p, d, identity: false })
    }

    /// `P = I` with `d = p`; projection and lifting become exact.
    pub fn identity(p: usize) -> Self {
        ProjectionMatrix { seed: 0, p, d: p, identity: true }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn source_dim(&self) -> usize {
        self.p
    }
    pub fn target_dim(&self) -> usize {
        self.d
    }
    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// Column `k` of `P` (length `p`).
    pub fn column(&self, k: usize) -> Vec<f64> {
        assert!(k < self.d, "column {k} out of range for d={}", self.d);
        let mut col = vec![0.0; self.p];
        if self.identity {
            col[k] = 1.0;
            return col;
        }
        let scale = 1.0 / (self.d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        for c in col.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *c = z * scale;
        }
        col
    }

    fn check_source(&self, len: usize) -> Result<()> {
        if len != self.p {
            return Err(Error::arg(format!("vector of length {len}, projection expects p={}", self.p)));
        }
        Ok(())
    }

    /// `P^T g`.
    pub fn project(&self, g: &[f64]) -> Result<Vec<f64>> {
        Ok(self.project_batch(&[g])?.pop().unwrap())
    }

    /// `P^T g` for many vectors, generating every column once.
    pub fn project_batch(&self, gs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        for g in gs {
            self.check_source(g.len())?;
        }
        if self.identity {
            return Ok(gs.iter().map(|g| g.to_vec()).collect());
        }
        let by_column: Vec<Vec<f64>> = (0..self.d)
            .into_par_iter()
            .map(|k| {
                let col = self.column(k);
                gs.iter().map(|g| dot(&col, g)).collect()
            })
            .collect();
        let mut out = vec![vec![0.0; self.d]; gs.len()];
        for (k, col) in by_column.into_iter().enumerate() {
            for (i, v) in col.into_iter().enumerate() {
                out[i][k] = v;
            }
        }
        Ok(out)
    }

    /// `theta_star + P x`.
    pub fn lift(&self, x: &[f64], theta_star: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::arg(format!("displacement of length {}, expected d={}", x.len(), self.d)));
        }
        self.check_source(theta_star.len())?;
        let mut out = theta_star.to_vec();
        if self.identity {
            for (o, xi) in out.iter_mut().zip(x) {
                *o += xi;
            }
            return Ok(out);
        }
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let col = self.column(k);
            for (o, c) in out.iter_mut().zip(&col) {
                *o += xk * c;
            }
        }
        Ok(out)
    }

    /// Replaces every gradient in `records` by its projection.
    pub fn project_records(&self, records: &mut [SampleRecord]) -> Result<()> {
        let projected = {
            let views: Vec<&[f64]> = records.iter().map(|r| r.gradient.as_slice()).collect();
            self.project_batch(&views)?
        };
        for (r, g) in records.iter_mut().zip(projected) {
            r.gradient = g;
        }
        Ok(())
    }

    /// Projects a raw store into a new store of dimension `d`.
    pub fn project_store(&self, store: &GradientStore) -> Result<GradientStore> {
        if store.header.projected {
            return Err(Error::arg("store already holds projected gradients"));
        }
        let mut records: Vec<SampleRecord> = store.records().cloned().collect();
        self.project_records(&mut records)?;
        let header = StoreHeader {
            dim: self.d as u64,
            projected: true,
            projection_seed: self.seed,
            ..store.header
        };
        GradientStore::from_records(header, records, &store.names())
    }
}
