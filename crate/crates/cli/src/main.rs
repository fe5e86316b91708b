use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ae_cli::config::RunConfig;
use ae_cli::error::{CliError, Result};
use ae_cli::pipeline::{Run, Stage, FAILED};
use ae_cli::report::write_report;
use clap::{Args, Parser, Subcommand};

/// Task grouping with gradient-based affinity estimates and boosted group adapters.
#[derive(Parser)]
#[command(name = "ae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults to the config stored in the output directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Master seed; overrides the config and re-derives per-stage seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline, then write the report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Stop after this stage.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Generate synthetic tasks and the base model.
    Gen(Common),
    /// Compute per-sample gradients at the base model.
    Grads(Common),
    /// Project gradients to the configured dimension.
    Project(Common),
    /// Estimate subset performance with linearized fine-tuning.
    Estimate(Common),
    /// Build the task affinity matrix.
    Affinity(Common),
    /// Cluster tasks into groups.
    Cluster(Common),
    /// Fit boosted group adapters and combination weights.
    Ensemble(Common),
    /// Evaluate the ensemble and the estimator.
    Eval(Common),
    /// Summarize evaluation artifacts as a table.
    Report {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn open_run(common: &Common) -> Result<Run> {
    let base = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Config(format!("config file {} not found", path.display())));
            }
            Some(RunConfig::load(path)?)
        }
        None => None,
    };
    match (base, common.seed) {
        (Some(cfg), seed) => Run::create(&seed.map_or(cfg.clone(), |s| cfg.with_seed(s)), &common.out),
        (None, None) => Run::open(&common.out),
        (None, Some(s)) => {
            let run = Run::open(&common.out)?;
            Run::create(&run.cfg.with_seed(s), &common.out)
        }
    }
}

fn dispatch(command: Command) -> (Option<PathBuf>, Result<()>) {
    let (common, stages) = match command {
        Command::Report { out } => {
            let res = write_report(&out).map(|table| print!("{table}"));
            return (Some(out), res);
        }
        Command::Run { common, stage } => (common, Err(stage)),
        Command::Gen(c) => (c, Ok(Stage::Gen)),
        Command::Grads(c) => (c, Ok(Stage::Grads)),
        Command::Project(c) => (c, Ok(Stage::Project)),
        Command::Estimate(c) => (c, Ok(Stage::Estimate)),
        Command::Affinity(c) => (c, Ok(Stage::Affinity)),
        Command::Cluster(c) => (c, Ok(Stage::Cluster)),
        Command::Ensemble(c) => (c, Ok(Stage::Ensemble)),
        Command::Eval(c) => (c, Ok(Stage::Eval)),
    };
    let out = common.out.clone();
    let res = (|| {
        // `Err` carries the optional stop stage of a full run.
        let until = match &stages {
            Err(Some(s)) => Some(s.parse::<Stage>()?),
            _ => None,
        };
        let run = open_run(&common)?;
        match stages {
            Ok(s) => run.execute(&[s]),
            Err(_) => {
                run.execute(&run.plan_stages(until))?;
                if until.is_none_or(|u| u == Stage::Eval) {
                    print!("{}", write_report(&run.dir)?);
                }
                Ok(())
            }
        }
    })();
    (Some(out), res)
}

fn mark_failed(dir: &Path, err: &CliError) {
    if dir.is_dir() && !dir.join(FAILED).exists() {
        let _ = std::fs::write(dir.join(FAILED), format!("{err}\n"));
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("AE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let cli = Cli::parse();
    let (dir, res) = dispatch(cli.command);
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                _ => {
                    if let Some(d) = dir {
                        mark_failed(&d, &e);
                    }
                    ExitCode::FAILURE
                }
            }
        }
    }
}
