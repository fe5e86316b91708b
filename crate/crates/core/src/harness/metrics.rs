//! Evaluation metrics comparing estimates with ground truth.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Key of one fine-tuning measurement: (sorted subset, task).
pub type FKey = (Vec<u32>, u32);

pub const RELATIVE_EPS: f64 = 1e-9;

/// Mean of `|f_hat - f| / max(|f|, eps)` over matched keys.
pub fn relative_error(estimates: &BTreeMap<FKey, f64>, truths: &BTreeMap<FKey, f64>) -> Result<f64> {
    if estimates.len() != truths.len() || estimates.keys().zip(truths.keys()).any(|(a, b)| a != b) {
        return Err(Error::arg("estimate and truth keys differ"));
    }
    if estimates.is_empty() {
        return Err(Error::arg("no entries to compare"));
    }
    let sum: f64 = estimates.iter().map(|(k, e)| (e - truths[k]).abs() / truths[k].abs().max(RELATIVE_EPS)).sum();
    Ok(sum / estimates.len() as f64)
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::arg("correlation needs two equal-length series of length >= 2"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let da: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let db: Vec<f64> = b.iter().map(|v| v - mb).collect();
    let denom = norm(&da) * norm(&db);
    if denom == 0.0 {
        return Err(Error::arg("correlation undefined for a constant series"));
    }
    Ok(dot(&da, &db) / denom)
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&ranks(a), &ranks(b))
}

/// `|theta_hat - theta*| / full_norm`.
pub fn finetune_distance(theta_hat: &[f64], theta_star: &[f64], full_norm: f64) -> Result<f64> {
    if theta_hat.len() != theta_star.len() {
        return Err(Error::arg("parameter vectors differ in length"));
    }
    if !(full_norm > 0.0) {
        return Err(Error::arg("reference norm must be positive"));
    }
    let diff: Vec<f64> = theta_hat.iter().zip(theta_star).map(|(a, b)| a - b).collect();
    Ok(norm(&diff) / full_norm)
}

/// `(1/k) sum_j |{i in S_j : f_i(S_j) < f_i({i})}| / |S_j|` with `f` a loss.
pub fn positive_transfer_rate(
    subsets: &[Vec<u32>],
    f_subset: &[BTreeMap<u32, f64>],
    singletons: &BTreeMap<u32, f64>,
) -> Result<f64> {
    if subsets.is_empty() || subsets.len() != f_subset.len() {
        return Err(Error::arg("need one score map per subset and at least one subset"));
    }
    let mut total = 0.0;
    for (s, f) in subsets.iter().zip(f_subset) {
        if s.is_empty() {
            return Err(Error::arg("empty subset"));
        }
        let mut better = 0usize;
        for &i in s {
            let base = singletons.get(&i).ok_or_else(|| Error::arg(format!("missing singleton loss for task {i}")))?;
            let joint = f.get(&i).ok_or_else(|| Error::arg(format!("missing loss for task {i} in subset {s:?}")))?;
            if joint < base {
                better += 1;
            }
        }
        total += better as f64 / s.len() as f64;
    }
    Ok(total / subsets.len() as f64)
}

pub fn adapter_cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg("vectors differ in length"));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::arg("cosine similarity of a zero vector"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Relative Taylor remainder `|h_X - (h* + g^T (X - theta*))| / |h_X - h*|`
/// averaged over inputs; inputs where the model output does not move are
/// skipped.
pub fn relative_remainder(
    model: &super::model::HarnessModel,
    theta: &[f64],
    inputs: &[&[f64]],
) -> Result<f64> {
    let disp: Vec<f64> = theta.iter().zip(&model.theta_star).map(|(a, b)| a - b).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in inputs {
        model.check(theta, s)?;
        let (h0, g) = model.output_and_gradient(&model.theta_star, s);
        let h = model.output(theta, s);
        let change = (h - h0).abs();
        if change > 0.0 {
            sum += (h - h0 - dot(&g, &disp)).abs() / change;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &[u32], t: u32) -> FKey {
        (s.to_vec(), t)
    }

    #[test]
    fn relative_error_cases() {
        let truth: BTreeMap<FKey, f64> = [(key(&[0, 1], 0), 0.5), (key(&[0, 1], 1), 0.8)].into();
        assert_eq!(relative_error(&truth, &truth).unwrap(), 0.0);
        let scaled: BTreeMap<FKey, f64> = truth.iter().map(|(k, v)| (k.clone(), v * 1.05)).collect();
        assert!((relative_error(&scaled, &truth).unwrap() - 0.05).abs() < 1e-12);
        let mut other = truth.clone();
        other.insert(key(&[2], 2), 0.1);
        assert!(relative_error(&other, &truth).is_err());
    }

    #[test]
    fn rank_correlation() {
        assert_eq!(ranks(&[3.0, 1.0, 2.0, 1.0]), vec![4.0, 1.5, 3.0, 1.5]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn distance_cases() {
        assert_eq!(finetune_distance(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(), 0.0);
        let d = finetune_distance(&[1.0, 2.003], &[1.0, 2.0], 3.0).unwrap();
        assert!((d - 0.001).abs() < 1e-12);
        assert!(finetune_distance(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn transfer_rate_hand_cases() {
        let singles: BTreeMap<u32, f64> = [(1, 0.5), (2, 0.5)].into();
        let f = vec![BTreeMap::from([(1, 0.4), (2, 0.6)])];
        assert_eq!(positive_transfer_rate(&[vec![1, 2]], &f, &singles).unwrap(), 0.5);
        let f = vec![BTreeMap::from([(1, 0.4), (2, 0.4)])];
        assert_eq!(positive_transfer_rate(&[vec![1, 2]], &f, &singles).unwrap(), 1.0);
        let partial: BTreeMap<u32, f64> = [(1, 0.5)].into();
        assert!(positive_transfer_rate(&[vec![1, 2]], &f, &partial).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert!((adapter_cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(adapter_cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(adapter_cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn linear_model_has_zero_remainder() {
        let m = crate::harness::model::HarnessModel::linear(vec![0.5, -0.25, 1.0]);
        let theta = vec![0.7, 0.1, 0.9];
        let s1 = [1.0, 2.0, -1.0];
        let s2 = [0.3, 0.0, 2.0];
        assert!(relative_remainder(&m, &theta, &[&s1, &s2]).unwrap() < 1e-15);
    }
}
