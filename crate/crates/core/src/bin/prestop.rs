use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prestopping::runner::{grid_search_q, run_experiment, summarize_dir, ExperimentConfig};
use prestopping::Error;

#[derive(Parser)]
#[command(
    name = "prestop",
    about = "Train on noisy labels with Prestopping",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method for every configured seed.
    Run(RunArgs),
    /// Repeat a run for every history length in `q_grid`.
    GridQ(RunArgs),
    /// Aggregate every per-seed summary.json under a directory.
    Summarize {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Config keys; a flag overrides the same key in the config file.
#[derive(Args)]
#[command(rename_all = "snake_case")]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    csv_path: Option<String>,
    #[arg(long)]
    csv_true_labels: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    per_class: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    spread: Option<String>,
    #[arg(long)]
    separation: Option<String>,
    #[arg(long)]
    validation_size: Option<String>,
    #[arg(long)]
    test_size: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    decay_points: Option<String>,
    #[arg(long)]
    decay_factor: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    heuristic: Option<String>,
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    q_grid: Option<String>,
    #[arg(long)]
    master_seed: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    jobs: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    histogram: Option<String>,
    #[arg(long)]
    plots: Option<String>,
    #[arg(long)]
    checkpoints: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> BTreeMap<String, String> {
        let flags = [
            ("source", &self.source),
            ("csv_path", &self.csv_path),
            ("csv_true_labels", &self.csv_true_labels),
            ("classes", &self.classes),
            ("per_class", &self.per_class),
            ("dim", &self.dim),
            ("spread", &self.spread),
            ("separation", &self.separation),
            ("validation_size", &self.validation_size),
            ("test_size", &self.test_size),
            ("noise", &self.noise),
            ("tau", &self.tau),
            ("hidden", &self.hidden),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("momentum", &self.momentum),
            ("batch_size", &self.batch_size),
            ("decay_points", &self.decay_points),
            ("decay_factor", &self.decay_factor),
            ("method", &self.method),
            ("heuristic", &self.heuristic),
            ("q", &self.q),
            ("epsilon", &self.epsilon),
            ("q_grid", &self.q_grid),
            ("master_seed", &self.master_seed),
            ("seeds", &self.seeds),
            ("jobs", &self.jobs),
            ("out", &self.out),
            ("histogram", &self.histogram),
            ("plots", &self.plots),
            ("checkpoints", &self.checkpoints),
        ];
        flags
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    fn load(&self) -> Result<ExperimentConfig, Error> {
        let overrides = self.overrides();
        match &self.config {
            Some(path) => ExperimentConfig::from_file(path, &overrides),
            None => ExperimentConfig::from_pairs(&overrides),
        }
    }
}

fn config_or_exit(args: &RunArgs) -> Result<ExperimentConfig, ExitCode> {
    args.load().map_err(|e| {
        eprintln!("config error: {e}");
        ExitCode::from(2)
    })
}

fn report_failures(failures: &[(u64, String)]) -> ExitCode {
    for (seed, msg) in failures {
        eprintln!("seed {seed} failed: {msg}");
    }
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    if matches!(e, Error::Config { .. }) {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let cfg = match config_or_exit(&args) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match run_experiment(&cfg) {
                Ok(report) => {
                    for run in &report.runs {
                        println!(
                            "seed {:>3}  best test error {:.4}  stop {}  {:.1}s",
                            run.summary.seed,
                            run.summary.best_test_error,
                            run.summary.stop_epoch.map_or("-".into(), |e| e.to_string()),
                            run.summary.wall_clock_seconds
                        );
                    }
                    for g in &report.aggregates {
                        println!(
                            "{} {}_{} q={}: {:.4} +/- {:.4} over {} runs",
                            g.method,
                            g.noise,
                            g.tau,
                            g.q,
                            g.mean_best_test_error,
                            g.std_error,
                            g.runs
                        );
                    }
                    println!("outputs in {}", cfg.group_dir().display());
                    report_failures(&report.failures)
                }
                Err(e) => fail(e),
            }
        }
        Command::GridQ(args) => {
            let cfg = match config_or_exit(&args) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match grid_search_q(&cfg) {
                Ok((rows, failures)) => {
                    println!("q,runs,mean_best_test_error,std_error");
                    for r in &rows {
                        println!(
                            "{},{},{:.4},{:.4}",
                            r.q, r.runs, r.mean_best_test_error, r.std_error
                        );
                    }
                    report_failures(&failures)
                }
                Err(e) => fail(e),
            }
        }
        Command::Summarize { dir } => match summarize_dir(&dir) {
            Ok(groups) => {
                for g in &groups {
                    println!(
                        "{} {} {}_{} q={}: {:.4} +/- {:.4} over {} runs",
                        g.method,
                        g.heuristic.as_deref().unwrap_or("-"),
                        g.noise,
                        g.tau,
                        g.q,
                        g.mean_best_test_error,
                        g.std_error,
                        g.runs
                    );
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
