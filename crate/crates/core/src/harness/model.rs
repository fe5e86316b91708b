//! Differentiable scalar models whose parameters are all adapter weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// `h_X(s) = X^T s`.
    Linear,
    /// `h_X(s) = sum_j w2_j tanh(W1_j s + b1_j) + b2`.
    Mlp1,
}

/// A harness model and its base weights `theta*`.
///
/// Parameters of `mlp1` are laid out as `[W1 (hidden x input, row-major), b1,
/// w2, b2]`, so `p = hidden * (input + 2) + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessModel {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub theta_star: Vec<f64>,
    /// Reference norm for relative fine-tuning distances.
    pub full_norm: f64,
}

pub const DEFAULT_MLP_INPUT: usize = 64;
pub const DEFAULT_MLP_HIDDEN: usize = 16;

impl HarnessModel {
    pub fn linear(theta_star: Vec<f64>) -> Self {
        let full_norm = norm(&theta_star);
        HarnessModel { kind: ModelKind::Linear, input_dim: theta_star.len(), hidden: 0, theta_star, full_norm }
    }

    /// Linear model with `N(0, scale^2 / dim)` base weights.
    pub fn linear_random(dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, scale / (dim as f64).sqrt()).unwrap();
        Self::linear((0..dim).map(|_| dist.sample(&mut rng)).collect())
    }

    pub fn mlp1_param_count(input_dim: usize, hidden: usize) -> usize {
        hidden * (input_dim + 2) + 1
    }

    /// One-hidden-layer tanh network with Gaussian base weights: `W1` entries
    /// `N(0, 1/input)`, `b1` entries `N(0, 0.1^2)`, `w2` entries
    /// `N(0, out_scale^2/hidden)`, `b2 = 0`.
    pub fn mlp1_random(input_dim: usize, hidden: usize, out_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).unwrap();
        let b1 = Normal::new(0.0, 0.1).unwrap();
        let w2 = Normal::new(0.0, out_scale / (hidden as f64).sqrt()).unwrap();
        let mut theta = Vec::with_capacity(Self::mlp1_param_count(input_dim, hidden));
        theta.extend((0..hidden * input_dim).map(|_| w1.sample(&mut rng)));
        theta.extend((0..hidden).map(|_| b1.sample(&mut rng)));
        theta.extend((0..hidden).map(|_| w2.sample(&mut rng)));
        theta.push(0.0);
        let full_norm = norm(&theta);
        HarnessModel { kind: ModelKind::Mlp1, input_dim, hidden, theta_star: theta, full_norm }
    }

    pub fn mlp1(input_dim: usize, hidden: usize, theta_star: Vec<f64>) -> Result<Self> {
        if theta_star.len() != Self::mlp1_param_count(input_dim, hidden) {
            return Err(Error::arg(format!(
                "mlp1 with input {input_dim} and hidden {hidden} needs {} parameters, got {}",
                Self::mlp1_param_count(input_dim, hidden),
                theta_star.len()
            )));
        }
        let full_norm = norm(&theta_star);
        Ok(HarnessModel { kind: ModelKind::Mlp1, input_dim, hidden, theta_star, full_norm })
    }

    /// Number of adapter parameters.
    pub fn p(&self) -> usize {
        match self.kind {
            ModelKind::Linear => self.input_dim,
            ModelKind::Mlp1 => Self::mlp1_param_count(self.input_dim, self.hidden),
        }
    }

    pub fn check(&self, theta: &[f64], s: &[f64]) -> Result<()> {
        if theta.len() != self.p() {
            return Err(Error::arg(format!("parameter vector of length {}, model has {}", theta.len(), self.p())));
        }
        if s.len() != self.input_dim {
            return Err(Error::arg(format!("input of length {}, model expects {}", s.len(), self.input_dim)));
        }
        Ok(())
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let w1 = self.hidden * self.input_dim;
        (0, w1, w1 + self.hidden, w1 + 2 * self.hidden)
    }

    fn hidden_pre(&self, theta: &[f64], s: &[f64], j: usize) -> f64 {
        let (_, b1, _, _) = self.offsets();
        let row = &theta[j * self.input_dim..(j + 1) * self.input_dim];
        dot(row, s) + theta[b1 + j]
    }

    pub fn output(&self, theta: &[f64], s: &[f64]) -> f64 {
        match self.kind {
            ModelKind::Linear => dot(theta, s),
            ModelKind::Mlp1 => {
                let (_, _, w2, b2) = self.offsets();
                (0..self.hidden).map(|j| theta[w2 + j] * self.hidden_pre(theta, s, j).tanh()).sum::<f64>() + theta[b2]
            }
        }
    }

    /// `h` and `dh/dtheta`.
    pub fn output_and_gradient(&self, theta: &[f64], s: &[f64]) -> (f64, Vec<f64>) {
        match self.kind {
            ModelKind::Linear => (dot(theta, s), s.to_vec()),
            ModelKind::Mlp1 => {
                let (_, b1, w2, b2) = self.offsets();
                let mut grad = vec![0.0; self.p()];
                let mut h = theta[b2];
                for j in 0..self.hidden {
                    let t = self.hidden_pre(theta, s, j).tanh();
                    h += theta[w2 + j] * t;
                    let da = theta[w2 + j] * (1.0 - t * t);
                    for (g, si) in grad[j * self.input_dim..(j + 1) * self.input_dim].iter_mut().zip(s) {
                        *g = da * si;
                    }
                    grad[b1 + j] = da;
                    grad[w2 + j] = t;
                }
                grad[b2] = 1.0;
                (h, grad)
            }
        }
    }

    /// `(d^2 h / dtheta^2) v`; identically zero for the linear model.
    pub fn output_hvp(&self, theta: &[f64], s: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p()];
        if self.kind == ModelKind::Linear {
            return out;
        }
        let (_, b1, w2, _) = self.offsets();
        let n = self.input_dim;
        for j in 0..self.hidden {
            let t = self.hidden_pre(theta, s, j).tanh();
            let d1 = 1.0 - t * t;
            let va = dot(&v[j * n..(j + 1) * n], s) + v[b1 + j];
            let vw = v[w2 + j];
            out[w2 + j] = d1 * va;
            let coef = d1 * vw - 2.0 * theta[w2 + j] * t * d1 * va;
            for (o, si) in out[j * n..(j + 1) * n].iter_mut().zip(s) {
                *o = coef * si;
            }
            out[b1 + j] = coef;
        }
        out
    }
}
