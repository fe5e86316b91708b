//! End-to-end runs of the pipeline through the library and the binary.

use std::fs;
use std::path::Path;
use std::process::Command;

use ae_cli::config::{HarnessConfig, RunConfig};
use ae_cli::error::CliError;
use ae_cli::pipeline::{as_loss, read_csv, transfer_rate_from_rows, FRow, Run, Stage, FAILED, F_TABLE, METRICS, PARTITION};
use ae_cli::report::{build_report, REPORT};
use ae_core::cluster::{Partition, PartitionFile};
use ae_core::harness::{ModelKind, SyntheticTaskSpec};
use ae_core::probe::Metric;
use tempfile::tempdir;

fn planted_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    let mut h = HarnessConfig::default();
    h.model.kind = ModelKind::Linear;
    h.model.scale = 0.5;
    h.tasks = SyntheticTaskSpec { n_tasks: 6, train_per_task: 80, val_per_task: 60, input_dim: 8, n_groups: 2, noise: 0.05, angle_deg: 90.0, ..SyntheticTaskSpec::default() };
    h.bruteforce.epochs = 100;
    cfg.harness = Some(h);
    cfg.plan.subsets = 30;
    cfg.eval.hessian_probes = 10;
    cfg.eval.hessian_samples = 5;
    cfg
}

fn run_all(cfg: &RunConfig, dir: &Path) -> Run {
    let run = Run::create(cfg, dir).unwrap();
    run.execute(&run.plan_stages(None)).unwrap();
    run
}

fn ae() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ae"))
}

#[test]
fn recovers_planted_partition() {
    let dir = tempdir().unwrap();
    let run = run_all(&planted_config(7), dir.path());
    let pf: PartitionFile = serde_json::from_str(&fs::read_to_string(run.path(PARTITION)).unwrap()).unwrap();
    assert_eq!(Partition::new(pf.groups), Partition::new(vec![vec![0, 1, 2], vec![3, 4, 5]]));
}

#[test]
fn same_seed_same_artifacts() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    run_all(&planted_config(3), a.path());
    run_all(&planted_config(3), b.path());
    for f in [METRICS, F_TABLE, PARTITION, "summary.json", "ensemble.json", "estimates.jsonl", "affinity.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn missing_store_is_a_config_error() {
    let cfg = RunConfig { store: Some("/nonexistent/grads.gfv1".into()), ..RunConfig::default() };
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(matches!(Run::create(&cfg, &out), Err(CliError::Config(_))));
    assert!(!out.exists(), "nothing should be created before validation passes");

    let cfg_path = dir.path().join("c.json");
    fs::write(&cfg_path, r#"{"store": "/nonexistent/grads.gfv1"}"#).unwrap();
    let status = ae().args(["run", "--config"]).arg(&cfg_path).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn stage_without_inputs_reports_missing_artifacts() {
    let dir = tempdir().unwrap();
    let run = Run::create(&planted_config(1), dir.path()).unwrap();
    match run.execute(&[Stage::Cluster]) {
        Err(CliError::Missing(m)) => assert_eq!(m, vec!["affinity.csv".to_string()]),
        other => panic!("expected missing artifacts, got {other:?}"),
    }
    assert!(run.path(FAILED).is_file());
}

#[test]
fn stages_rerun_in_isolation() {
    let dir = tempdir().unwrap();
    let cfg = planted_config(5);
    let run = run_all(&cfg, dir.path());
    let before = fs::read(run.path(PARTITION)).unwrap();
    let estimates = fs::read(run.path("estimates.jsonl")).unwrap();
    fs::remove_file(run.path(PARTITION)).unwrap();

    // The binary picks up config.json from the run directory.
    let status = ae().arg("cluster").arg("--out").arg(dir.path()).status().unwrap();
    assert!(status.success());
    assert_eq!(fs::read(run.path(PARTITION)).unwrap(), before);
    assert_eq!(fs::read(run.path("estimates.jsonl")).unwrap(), estimates);
    assert!(!run.path(FAILED).exists());
}

#[test]
fn report_rows_and_transfer_rate() {
    let dir = tempdir().unwrap();
    let run = run_all(&planted_config(11), dir.path());
    let rows = build_report(dir.path()).unwrap();
    let n = 6;
    let m = rows.iter().filter(|r| r.kind == "group").count();
    assert_eq!(rows.len(), 1 + m + n);
    assert_eq!(rows[0].kind, "run");
    let weights: f64 = rows.iter().filter_map(|r| r.weight).sum();
    assert!((weights - 1.0).abs() < 1e-9);

    // Recompute the transfer rate by hand from the f table.
    let f: Vec<FRow> = read_csv(&run.path(F_TABLE)).unwrap();
    let single = |t: u32| f.iter().find(|r| r.kind == "singleton" && r.task == t).unwrap().estimate;
    let plan: Vec<&FRow> = f.iter().filter(|r| r.kind == "plan").collect();
    let mut total = 0.0;
    let mut k = 0;
    for chunk in plan.chunks(3) {
        let better = chunk
            .iter()
            .filter(|r| as_loss(r.estimate, Metric::ValAccuracy) < as_loss(single(r.task), Metric::ValAccuracy))
            .count();
        total += better as f64 / chunk.len() as f64;
        k += 1;
    }
    let want = total / k as f64;
    let got = transfer_rate_from_rows(&f, Metric::ValAccuracy, false).unwrap().unwrap();
    assert!((got - want).abs() < 1e-12);
    assert!((rows[0].transfer_rate.unwrap() - want).abs() < 1e-12);

    let out = ae().arg("report").arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("group1"));
    assert!(dir.path().join(REPORT).is_file());
}

#[test]
fn report_refuses_empty_or_missing_metrics() {
    let dir = tempdir().unwrap();
    run_all(&planted_config(2), dir.path());
    fs::write(dir.path().join(METRICS), "metric,value,config_hash,seed\n").unwrap();
    let _ = fs::remove_file(dir.path().join(REPORT));
    assert!(matches!(build_report(dir.path()), Err(CliError::Stage(_))));
    let out = ae().arg("report").arg("--out").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(!dir.path().join(REPORT).exists());

    fs::remove_file(dir.path().join(METRICS)).unwrap();
    match build_report(dir.path()) {
        Err(CliError::Missing(m)) => assert_eq!(m, vec![METRICS.to_string()]),
        other => panic!("expected missing metrics, got {other:?}"),
    }
}

#[test]
fn external_store_runs_without_harness() {
    let dir = tempdir().unwrap();
    let first = run_all(&planted_config(4), &dir.path().join("a"));
    let mut cfg = RunConfig { seed: 4, store: Some(first.path("grads.gfv1")), ..RunConfig::default() };
    cfg.plan.subsets = 30;
    let out = dir.path().join("b");
    let run = Run::create(&cfg, &out).unwrap();
    assert!(!run.plan_stages(None).contains(&Stage::Gen));
    run.execute(&run.plan_stages(None)).unwrap();
    assert_eq!(fs::read(out.join(PARTITION)).unwrap(), fs::read(first.path(PARTITION)).unwrap());
    build_report(&out).unwrap();
}
