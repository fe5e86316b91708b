//! The final report table, assembled from evaluation artifacts only.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ae_core::cluster::PartitionFile;
use ae_core::ensemble::EnsembleManifest;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::pipeline::{
    read_csv, subset_key, transfer_rate_from_rows, write_csv, FRow, Summary, TaskRow, ENSEMBLE, F_TABLE, METRICS,
    PARTITION, SUMMARY, TASK_METRICS,
};

pub const REPORT: &str = "report.csv";

/// Artifacts the report is built from.
pub const INPUTS: [&str; 6] = [SUMMARY, METRICS, PARTITION, F_TABLE, TASK_METRICS, ENSEMBLE];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `run`, `group` or `task`.
    pub kind: String,
    pub id: usize,
    pub name: String,
    pub members: String,
    pub weight: Option<f64>,
    pub acc_by_task: Option<f64>,
    pub acc_blended: Option<f64>,
    pub acc_global: Option<f64>,
    pub transfer_rate: Option<f64>,
    pub speedup: Option<f64>,
    pub sharpness: Option<f64>,
}

impl ReportRow {
    fn new(kind: &str, id: usize, name: String, members: String) -> Self {
        ReportRow {
            kind: kind.into(),
            id,
            name,
            members,
            weight: None,
            acc_by_task: None,
            acc_blended: None,
            acc_global: None,
            transfer_rate: None,
            speedup: None,
            sharpness: None,
        }
    }
}

#[derive(Deserialize)]
struct MetricRow {
    metric: String,
    value: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Builds the report rows: one for the run, one per group, one per task.
pub fn build_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let missing: Vec<String> = INPUTS.iter().filter(|f| !dir.join(f).is_file()).map(|f| f.to_string()).collect();
    if !missing.is_empty() {
        return Err(CliError::Missing(missing));
    }
    let summary: Summary = read_json(&dir.join(SUMMARY))?;
    let metric_rows: Vec<MetricRow> = read_csv(&dir.join(METRICS))?;
    if metric_rows.is_empty() {
        return Err(CliError::Stage(format!("{METRICS} has no rows")));
    }
    let metrics: BTreeMap<String, f64> = metric_rows.into_iter().map(|r| (r.metric, r.value)).collect();
    let partition: PartitionFile = read_json(&dir.join(PARTITION))?;
    let f_rows: Vec<FRow> = read_csv(&dir.join(F_TABLE))?;
    let tasks: Vec<TaskRow> = read_csv(&dir.join(TASK_METRICS))?;
    if tasks.is_empty() {
        return Err(CliError::Stage(format!("{TASK_METRICS} has no rows")));
    }
    let manifest: EnsembleManifest = read_json(&dir.join(ENSEMBLE))?;

    let mean = |f: fn(&TaskRow) -> f64| tasks.iter().map(f).sum::<f64>() / tasks.len() as f64;
    let sharp = |j: usize| {
        metrics.get(&format!("sharpness_exact_g{j}")).or_else(|| metrics.get(&format!("sharpness_hutchinson_g{j}"))).copied()
    };

    let mut run = ReportRow::new("run", 0, summary.config_hash.clone(), format!("{} groups", partition.m));
    run.acc_by_task = Some(mean(|t| t.acc_by_task));
    run.acc_blended = Some(mean(|t| t.acc_blended));
    run.acc_global = Some(mean(|t| t.acc_global));
    run.transfer_rate = transfer_rate_from_rows(&f_rows, summary.metric, false)?;
    run.speedup = metrics.get("speedup").copied();
    run.sharpness = (0..partition.m).filter_map(sharp).reduce(f64::max);
    let mut rows = vec![run];

    for (j, group) in partition.groups.iter().enumerate() {
        let mut row = ReportRow::new("group", j, format!("group{j}"), subset_key(group));
        row.weight = manifest.weights.get(j).copied();
        let members: Vec<&TaskRow> = tasks.iter().filter(|t| t.group == j).collect();
        if !members.is_empty() {
            let k = members.len() as f64;
            row.acc_by_task = Some(members.iter().map(|t| t.acc_by_task).sum::<f64>() / k);
            row.acc_blended = Some(members.iter().map(|t| t.acc_blended).sum::<f64>() / k);
            row.acc_global = Some(members.iter().map(|t| t.acc_global).sum::<f64>() / k);
        }
        row.sharpness = sharp(j);
        rows.push(row);
    }

    for t in &tasks {
        let mut row = ReportRow::new("task", t.task as usize, t.name.clone(), t.group.to_string());
        row.acc_by_task = Some(t.acc_by_task);
        row.acc_blended = Some(t.acc_blended);
        row.acc_global = Some(t.acc_global);
        rows.push(row);
    }
    Ok(rows)
}

/// Writes `report.csv` and returns a plain-text rendering of it.
pub fn write_report(dir: &Path) -> Result<String> {
    let rows = build_report(dir)?;
    write_csv(&dir.join(REPORT), &rows)?;
    Ok(render(&rows))
}

fn render(rows: &[ReportRow]) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut out = format!(
        "{:<6} {:>3} {:<18} {:<16} {:>7} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}\n",
        "kind", "id", "name", "members", "weight", "acc_task", "acc_blnd", "acc_glob", "transfer", "speedup", "sharpness"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<6} {:>3} {:<18} {:<16} {:>7} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}\n",
            r.kind,
            r.id,
            r.name,
            r.members,
            f(r.weight),
            f(r.acc_by_task),
            f(r.acc_blended),
            f(r.acc_global),
            f(r.transfer_rate),
            f(r.speedup),
            f(r.sharpness),
        ));
    }
    out
}
