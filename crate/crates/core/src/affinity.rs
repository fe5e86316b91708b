//! Random task subsets and the task-affinity matrix built from their
//! estimates: `T[i][j]` is the mean of `f_i(S)` over sampled subsets `S`
//! containing both `i` and `j`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{Metric, SubsetEstimate};

pub const DEFAULT_SUBSETS: usize = 200;
pub const DEFAULT_SUBSET_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub n: usize,
    pub k: usize,
    pub size: usize,
    pub seed: u64,
    pub subsets: Vec<Vec<u32>>,
    /// Task pairs `(i, j)`, `i < j`, that never appear together.
    pub uncovered_pairs: Vec<(u32, u32)>,
}

pub fn sample_subsets(n: usize, k: usize, size: usize, seed: u64) -> Result<SubsetPlan> {
    if size < 2 || size > n {
        return Err(Error::arg(format!("subset size must satisfy 2 <= size <= n, got size={size}, n={n}")));
    }
    if k == 0 {
        return Err(Error::arg("need at least one subset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subsets: Vec<Vec<u32>> = (0..k)
        .map(|_| {
            let mut s: Vec<u32> = sample(&mut rng, n, size).into_iter().map(|i| i as u32).collect();
            s.sort_unstable();
            s
        })
        .collect();
    let counts = co_occurrence(n, &subsets);
    let mut uncovered_pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if counts[i][j] == 0 {
                uncovered_pairs.push((i as u32, j as u32));
            }
        }
    }
    if !uncovered_pairs.is_empty() {
        log::warn!("{} task pairs never co-occur in the subset plan", uncovered_pairs.len());
    }
    Ok(SubsetPlan { n, k, size, seed, subsets, uncovered_pairs })
}

/// `counts[i][j]`: subsets containing both `i` and `j`; the diagonal counts
/// subsets containing `i`.
pub fn co_occurrence(n: usize, subsets: &[Vec<u32>]) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; n]; n];
    for s in subsets {
        for &i in s {
            for &j in s {
                counts[i as usize][j as usize] += 1;
            }
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Zero-count entries take the mean of the row's defined off-diagonal entries.
    RowMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    pub t: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
    pub metric: Metric,
    pub fill: FillPolicy,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.t.len()
    }

    /// `(T + T^T) / 2`.
    pub fn symmetrized(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        (0..n).map(|i| (0..n).map(|j| 0.5 * (self.t[i][j] + self.t[j][i])).collect()).collect()
    }

    pub fn to_csv(&self, names: &[String]) -> Result<String> {
        matrix_csv(names, &self.t, |v| format!("{v:?}"))
    }

    pub fn counts_csv(&self, names: &[String]) -> Result<String> {
        matrix_csv(names, &self.counts, |v| v.to_string())
    }
}

fn matrix_csv<T>(names: &[String], rows: &[Vec<T>], fmt: impl Fn(&T) -> String) -> Result<String> {
    if names.len() != rows.len() {
        return Err(Error::arg(format!("{} names for {} rows", names.len(), rows.len())));
    }
    let mut out = String::from("task");
    for name in names {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for (name, row) in names.iter().zip(rows) {
        out.push_str(name);
        for v in row {
            let _ = write!(out, ",{}", fmt(v));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses a CSV written by [`AffinityMatrix::to_csv`] into names and rows.
pub fn parse_matrix_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty matrix CSV".into()))?;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for line in lines {
        let row: std::result::Result<Vec<f64>, _> = line.split(',').skip(1).map(str::parse::<f64>).collect();
        let row = row.map_err(|e| Error::Format(format!("bad matrix entry: {e}")))?;
        if row.len() != names.len() {
            return Err(Error::Format(format!("row with {} entries, expected {}", row.len(), names.len())));
        }
        rows.push(row);
    }
    if rows.len() != names.len() {
        return Err(Error::Format(format!("{} rows for {} columns", rows.len(), names.len())));
    }
    Ok((names, rows))
}

pub fn build_affinity(plan: &SubsetPlan, estimates: &[SubsetEstimate]) -> Result<AffinityMatrix> {
    let n = plan.n;
    let mut by_subset: BTreeMap<&[u32], &SubsetEstimate> = BTreeMap::new();
    let mut metric = None;
    for e in estimates {
        by_subset.entry(e.subset.as_slice()).or_insert(e);
        match metric {
            None => metric = Some(e.metric),
            Some(m) if m != e.metric => return Err(Error::arg("estimates mix metrics")),
            _ => {}
        }
    }

    let mut sums = vec![vec![0.0; n]; n];
    let mut counts = vec![vec![0u64; n]; n];
    for (idx, s) in plan.subsets.iter().enumerate() {
        // Positional match first so repeated subsets may carry distinct estimates.
        let est = match estimates.get(idx) {
            Some(e) if e.subset == *s => e,
            _ => by_subset
                .get(s.as_slice())
                .copied()
                .ok_or_else(|| Error::arg(format!("no estimate for subset {s:?}")))?,
        };
        for &i in s {
            let fi = *est
                .scores
                .get(&i)
                .ok_or_else(|| Error::arg(format!("estimate for subset {s:?} has no score for task {i}")))?;
            for &j in s {
                sums[i as usize][j as usize] += fi;
                counts[i as usize][j as usize] += 1;
            }
        }
    }

    let mut t = vec![vec![f64::NAN; n]; n];
    for i in 0..n {
        for j in 0..n {
            if counts[i][j] > 0 {
                t[i][j] = sums[i][j] / counts[i][j] as f64;
            }
        }
    }
    for i in 0..n {
        let defined: Vec<f64> = (0..n).filter(|&j| j != i && counts[i][j] > 0).map(|j| t[i][j]).collect();
        let fill = if defined.is_empty() {
            if counts[i][i] > 0 {
                t[i][i]
            } else {
                0.0
            }
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        for j in 0..n {
            if counts[i][j] == 0 {
                t[i][j] = fill;
            }
        }
    }
    Ok(AffinityMatrix { t, counts, metric: metric.unwrap_or_default(), fill: FillPolicy::RowMean })
}
