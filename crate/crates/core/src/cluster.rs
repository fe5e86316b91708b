//! Task grouping by average cluster density.
//!
//! A partition with indicator vectors `v_j` corresponds to the matrix
//! `X = sum_j v_j v_j^T / v_j^T v_j`, which satisfies `Xe = e`, `X >= 0` and
//! `X ⪰ 0`. Relaxing the integrality gives the convex program
//!
//! ```text
//! maximize <T, X> + lambda_reg tr(X)   s.t.  Xe = e,  X >= 0,  X ⪰ 0
//! ```
//!
//! solved here by projected gradient ascent, where each projection onto the
//! feasible set is computed with Dykstra's alternating projections. The
//! solution is rounded by thresholding at `c / n` and taking connected
//! components.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance subtracted from the rounding threshold so that entries sitting
/// exactly at `c / n` are not lost to rounding noise.
const ROUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem {
    pub t_sym: Vec<Vec<f64>>,
    pub lambda_reg: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl SdpProblem {
    pub fn new(t_sym: Vec<Vec<f64>>, lambda_reg: f64) -> Self {
        SdpProblem { t_sym, lambda_reg, tol: 1e-7, max_iter: 60 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub x: Vec<Vec<f64>>,
    pub objective: f64,
    /// `max_i |(Xe)_i - 1|`.
    pub row_sum_residual: f64,
    pub min_entry: f64,
    pub min_eigenvalue: f64,
    pub iterations: usize,
    pub converged: bool,
    pub eigendecompositions: u64,
    /// Objective after every accepted ascent step.
    pub history: Vec<f64>,
}

impl SdpSolution {
    pub fn is_feasible(&self) -> bool {
        self.row_sum_residual <= 1e-4 && self.min_entry >= -1e-8 && self.min_eigenvalue >= -1e-6
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<Vec<u32>>,
}

impl Partition {
    /// Normalizes group order: members ascending, groups by smallest member.
    pub fn new(mut groups: Vec<Vec<u32>>) -> Self {
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.sort();
        Partition { groups }
    }

    pub fn single(n: usize) -> Self {
        Partition { groups: vec![(0..n as u32).collect()] }
    }

    pub fn m(&self) -> usize {
        self.groups.len()
    }

    pub fn n(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Group index of each task.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.n()];
        for (gi, g) in self.groups.iter().enumerate() {
            for &t in g {
                if (t as usize) < out.len() {
                    out[t as usize] = gi;
                }
            }
        }
        out
    }

    pub fn group_of(&self, task: u32) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&task))
    }

    /// Checks that the groups are nonempty and form a disjoint cover of `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for g in &self.groups {
            if g.is_empty() {
                return Err(Error::arg("partition has an empty group"));
            }
            for &t in g {
                let slot = seen.get_mut(t as usize).ok_or_else(|| Error::arg(format!("task {t} out of range")))?;
                if *slot {
                    return Err(Error::arg(format!("task {t} appears twice")));
                }
                *slot = true;
            }
        }
        if let Some(t) = seen.iter().position(|s| !s) {
            return Err(Error::arg(format!("task {t} is not assigned to a group")));
        }
        Ok(())
    }

    /// The partition matrix `sum_j v_j v_j^T / |G_j|`.
    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut x = vec![vec![0.0; n]; n];
        for g in &self.groups {
            let w = 1.0 / g.len() as f64;
            for &u in g {
                for &v in g {
                    x[u as usize][v as usize] = w;
                }
            }
        }
        x
    }
}

/// `(1/m) sum_j v_j^T T v_j / v_j^T v_j`.
pub fn average_density(t: &[Vec<f64>], partition: &Partition) -> Result<f64> {
    if partition.groups.is_empty() {
        return Err(Error::arg("partition has no groups"));
    }
    let mut total = 0.0;
    for g in &partition.groups {
        if g.is_empty() {
            return Err(Error::arg("partition has an empty group"));
        }
        let mut s = 0.0;
        for &u in g {
            let row = t.get(u as usize).ok_or_else(|| Error::arg(format!("task {u} out of range")))?;
            for &v in g {
                s += row.get(v as usize).ok_or_else(|| Error::arg(format!("task {v} out of range")))?;
            }
        }
        total += s / g.len() as f64;
    }
    Ok(total / partition.m() as f64)
}

/// `T` minus the mean of its off-diagonal entries (every entry shifted).
pub fn centered(t: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = t.len();
    if n < 2 {
        return t.to_vec();
    }
    let mut s = 0.0;
    for (i, row) in t.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v;
            }
        }
    }
    let mu = s / (n * (n - 1)) as f64;
    t.iter().map(|row| row.iter().map(|v| v - mu).collect()).collect()
}

/// Density used to compare partitions with different group counts: the
/// average density of the off-diagonal-centered matrix. The plain density of
/// a nonnegative matrix grows when groups are merged, so it cannot choose `m`.
pub fn selection_density(t_sym: &[Vec<f64>], partition: &Partition) -> Result<f64> {
    average_density(&centered(t_sym), partition)
}

fn to_dmatrix(t: &[Vec<f64>]) -> DMatrix<f64> {
    let n = t.len();
    DMatrix::from_fn(n, n, |i, j| t[i][j])
}

fn to_rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| (0..x.ncols()).map(|j| x[(i, j)]).collect()).collect()
}

fn check_symmetric(t: &[Vec<f64>]) -> Result<usize> {
    let n = t.len();
    if n == 0 {
        return Err(Error::arg("empty score matrix"));
    }
    for (i, row) in t.iter().enumerate() {
        if row.len() != n {
            return Err(Error::arg(format!("score matrix row {i} has {} entries, expected {n}", row.len())));
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::arg(format!("score matrix entry ({i},{j}) is not finite")));
            }
            if *v != t[j][i] {
                return Err(Error::arg(format!("score matrix is not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(n)
}

/// Projection onto `{X symmetric : Xe = e}` for symmetric input.
fn project_affine(v: &DMatrix<f64>) -> DMatrix<f64> {
    let n = v.nrows();
    let nf = n as f64;
    let r: Vec<f64> = (0..n).map(|i| v.row(i).sum() - 1.0).collect();
    let total: f64 = r.iter().sum();
    let a: Vec<f64> = r.iter().map(|ri| (ri - total / (2.0 * nf)) / nf).collect();
    DMatrix::from_fn(n, n, |i, j| v[(i, j)] - a[i] - a[j])
}

fn project_nonneg(v: &DMatrix<f64>) -> DMatrix<f64> {
    v.map(|x| x.max(0.0))
}

fn project_psd(v: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (v + v.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&clipped) * q.transpose()
}

/// Dykstra's algorithm for the projection onto the feasible set. Returns the
/// projection and the number of eigendecompositions spent.
fn project_feasible(y: &DMatrix<f64>, max_inner: usize, tol: f64) -> (DMatrix<f64>, u64) {
    let n = y.nrows();
    let mut x = y.clone();
    let mut p = DMatrix::zeros(n, n);
    let mut q = DMatrix::zeros(n, n);
    let mut r = DMatrix::zeros(n, n);
    let mut eigs = 0;
    for _ in 0..max_inner {
        eigs += 1;
        let a = project_affine(&(&x + &p));
        p = &x + &p - &a;
        let b = project_nonneg(&(&a + &q));
        q = &a + &q - &b;
        let c = project_psd(&(&b + &r));
        r = &b + &r - &c;
        let change = (&c - &x).norm();
        x = c;
        if change <= tol * (1.0 + x.norm()) {
            break;
        }
    }
    (x, eigs)
}

/// Restores exact feasibility of a nearly feasible matrix without changing row
/// sums: mixing with `J/n` lifts negative entries, mixing with `I` lifts
/// negative eigenvalues.
fn polish(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let nf = n as f64;
    let mut x = project_affine(&((x + x.transpose()) * 0.5));
    let min_entry = x.min();
    if min_entry < 0.0 {
        let a = -min_entry / (1.0 / nf - min_entry);
        x = x * (1.0 - a) + DMatrix::from_element(n, n, a / nf);
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        x = project_affine(&x);
    }
    let min_eig = SymmetricEigen::new(x.clone()).eigenvalues.min();
    if min_eig < 0.0 {
        let b = -min_eig / (1.0 - min_eig);
        x = x * (1.0 - b) + DMatrix::identity(n, n) * b;
    }
    x
}

fn objective(g: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    g.dot(x)
}

fn residuals(x: &DMatrix<f64>) -> (f64, f64, f64) {
    let n = x.nrows();
    let row = (0..n).map(|i| (x.row(i).sum() - 1.0).abs()).fold(0.0, f64::max);
    let min_eig = SymmetricEigen::new((x + x.transpose()) * 0.5).eigenvalues.min();
    (row, x.min(), min_eig)
}

/// Solves the relaxed clustering program by projected gradient ascent from
/// `J/n` with geometrically growing steps.
pub fn solve_sdp(problem: &SdpProblem) -> Result<SdpSolution> {
    let n = check_symmetric(&problem.t_sym)?;
    if !problem.lambda_reg.is_finite() {
        return Err(Error::arg("lambda_reg must be finite"));
    }
    let nf = n as f64;
    let mut g = to_dmatrix(&problem.t_sym);
    for i in 0..n {
        g[(i, i)] += problem.lambda_reg;
    }
    let gnorm = g.norm();
    let mut x = DMatrix::from_element(n, n, 1.0 / nf);
    let mut value = objective(&g, &x);
    let mut history = vec![value];
    if gnorm == 0.0 || n == 1 {
        let (row, min_entry, min_eig) = residuals(&x);
        return Ok(SdpSolution {
            x: to_rows(&x),
            objective: value,
            row_sum_residual: row,
            min_entry,
            min_eigenvalue: min_eig,
            iterations: 0,
            converged: true,
            eigendecompositions: 1,
            history,
        });
    }

    let mut tau = 1.0 / gnorm;
    let mut converged = false;
    let mut iterations = 0;
    let mut eigendecompositions = 0;
    while iterations < problem.max_iter {
        iterations += 1;
        let y = &x + &g * tau;
        let (projected, eigs) = project_feasible(&y, 400, 1e-12);
        eigendecompositions += eigs + 1;
        let candidate = polish(&projected);
        let cand_value = objective(&g, &candidate);
        let step = (&candidate - &x).norm();
        if cand_value >= value {
            x = candidate;
            value = cand_value;
            history.push(value);
        }
        if step <= problem.tol * (1.0 + x.norm()) {
            converged = true;
            break;
        }
        tau *= 2.0;
    }
    if !converged {
        log::debug!("SDP solver stopped after {iterations} iterations without meeting tolerance");
    }
    let (row, min_entry, min_eig) = residuals(&x);
    Ok(SdpSolution {
        x: to_rows(&x),
        objective: value,
        row_sum_residual: row,
        min_entry,
        min_eigenvalue: min_eig,
        iterations,
        converged,
        eigendecompositions: eigendecompositions + 1,
        history,
    })
}

/// Connected components of the graph `{(u, v) : X[u][v] >= c / n}`.
pub fn round_solution(x: &[Vec<f64>], c: f64, n: usize) -> Result<Partition> {
    if x.len() != n || x.iter().any(|r| r.len() != n) {
        return Err(Error::arg(format!("rounding expects an {n}x{n} matrix")));
    }
    if !(c >= 1.0) {
        return Err(Error::arg(format!("rounding constant c must be >= 1, got {c}")));
    }
    let threshold = c / n as f64 - ROUND_SLACK;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for u in 0..n {
        for v in u + 1..n {
            if x[u][v] >= threshold || x[v][u] >= threshold {
                let (a, b) = (find(&mut parent, u), find(&mut parent, v));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<u32>> = Vec::new();
    let mut root_group = vec![usize::MAX; n];
    for u in 0..n {
        let r = find(&mut parent, u);
        if root_group[r] == usize::MAX {
            root_group[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[root_group[r]].push(u as u32);
    }
    Ok(Partition::new(groups))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub lambda_reg: f64,
    pub c: f64,
}

/// Default sweep: trace weights from strongly merging to mildly splitting,
/// scaled by the spread of the off-diagonal scores.
pub fn default_candidates(t_sym: &[Vec<f64>]) -> Vec<Candidate> {
    let n = t_sym.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lo = lo.min(t_sym[i][j]);
                hi = hi.max(t_sym[i][j]);
            }
        }
    }
    let spread = if hi > lo { hi - lo } else { 1.0 };
    [-4.0, -2.0, -1.0, -0.5, -0.25, -0.1, 0.0, 0.1, 0.25]
        .iter()
        .map(|f| Candidate { lambda_reg: f * spread, c: 1.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub partition: Partition,
    pub candidate: Candidate,
    /// Plain average density of the selected partition.
    pub avg_density: f64,
    /// Score used for the selection (see [`selection_density`]).
    pub score: f64,
    /// All candidates examined with their partitions and scores, in input order.
    pub sweep: Vec<(Candidate, Partition, f64)>,
    pub degenerate: bool,
    /// Eigendecompositions spent across all candidate solves.
    pub eigendecompositions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub m: usize,
    pub groups: Vec<Vec<u32>>,
    pub avg_density: f64,
    pub lambda_reg: f64,
    pub c: f64,
}

impl Selection {
    pub fn to_file(&self) -> PartitionFile {
        PartitionFile {
            m: self.partition.m(),
            groups: self.partition.groups.clone(),
            avg_density: self.avg_density,
            lambda_reg: self.candidate.lambda_reg,
            c: self.candidate.c,
        }
    }
}

/// Solves and rounds for every candidate and keeps the partition with the
/// highest selection density, preferring fewer groups on ties.
pub fn select_num_groups(t_sym: &[Vec<f64>], candidates: &[Candidate]) -> Result<Selection> {
    let n = check_symmetric(t_sym)?;
    if candidates.is_empty() {
        return Err(Error::arg("no clustering candidates"));
    }
    let solved: Vec<(Candidate, Partition, f64, u64, bool)> = candidates
        .par_iter()
        .map(|cand| {
            let sol = solve_sdp(&SdpProblem::new(t_sym.to_vec(), cand.lambda_reg))?;
            let part = round_solution(&sol.x, cand.c, n)?;
            let score = selection_density(t_sym, &part)?;
            Ok((*cand, part, score, sol.eigendecompositions, sol.converged))
        })
        .collect::<Result<_>>()?;
    let eigendecompositions = solved.iter().map(|s| s.3).sum();
    let unconverged = solved.iter().filter(|s| !s.4).count();
    if unconverged > 0 {
        log::warn!("{unconverged} of {} SDP solves stopped at the iteration limit", solved.len());
    }
    let sweep: Vec<(Candidate, Partition, f64)> = solved.into_iter().map(|(c, p, s, _, _)| (c, p, s)).collect();

    let mut best = 0;
    for (i, (_, part, score)) in sweep.iter().enumerate() {
        let (_, bpart, bscore) = &sweep[best];
        let better = *score > *bscore + 1e-12 || ((*score - *bscore).abs() <= 1e-12 && part.m() < bpart.m());
        if better {
            best = i;
        }
    }
    let (candidate, partition, score) = sweep[best].clone();
    let degenerate = sweep.iter().all(|(_, p, _)| p.m() == 1);
    if degenerate {
        log::warn!("every clustering candidate produced a single group");
    }
    let avg_density = average_density(t_sym, &partition)?;
    Ok(Selection { partition, candidate, avg_density, score, sweep, degenerate, eigendecompositions })
}
