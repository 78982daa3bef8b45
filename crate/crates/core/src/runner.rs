//! Experiment orchestration: config files, seeded repetitions, method
//! dispatch, output layout and aggregation.
//!
//! Config files are flat `key = value` lines, optionally grouped under
//! `[section]` headers that are only there for readability; key names are
//! unique across sections. `#` starts a comment. See the README for the
//! full key list.
//!
//! Outputs go to `<out>/<method>/<noise>_<tau>/seed<k>/`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    apply_noise, load_csv, split, synth_gaussian, CsvOptions, NoiseKind, NoiseProvenance,
    NoisyDataset, SplitSpec, SynthSpec,
};
use crate::engine::{run_default, run_prestopping, Checkpoint, Phase, StopHeuristic, TrainConfig};
use crate::error::{Error, Result};
use crate::instrumentation::{
    best_test_error, summarize, write_metrics_csv, write_plot_script, EpochMetrics, GroupSummary,
    LossHistogram, MetricsCollector, RunSummary,
};
use crate::nn::{write_checkpoint, NetworkSpec, NetworkState, OptimizerConfig};
use crate::refurbish::{run_prestopping_plus, write_audit_log, RefurbConfig};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Default,
    Prestopping,
    PrestoppingPlus,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Default => "default",
            Method::Prestopping => "prestopping",
            Method::PrestoppingPlus => "prestopping_plus",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Method::Default),
            "prestopping" => Ok(Method::Prestopping),
            "prestopping_plus" => Ok(Method::PrestoppingPlus),
            _ => Err(config_err("method", format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    Validation,
    NoiseRate,
}

impl HeuristicKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeuristicKind::Validation => "validation",
            HeuristicKind::NoiseRate => "noise_rate",
        }
    }
}

impl FromStr for HeuristicKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" => Ok(HeuristicKind::Validation),
            "noise_rate" => Ok(HeuristicKind::NoiseRate),
            _ => Err(config_err("heuristic", format!("unknown heuristic `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        separation: f64,
    },
    Csv {
        path: PathBuf,
        true_label_column: bool,
        classes: Option<usize>,
    },
}

/// A fully validated experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub validation_size: usize,
    pub test_size: usize,
    pub noise: NoiseKind,
    /// Noise rate: injected for synthetic noise, and the known rate for the
    /// noise-rate heuristic.
    pub tau: Option<f64>,
    pub method: Method,
    pub heuristic: HeuristicKind,
    pub q: usize,
    pub epsilon: f64,
    pub q_grid: Vec<usize>,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub out: PathBuf,
    pub histogram: bool,
    pub plots: bool,
    pub checkpoints: bool,
}

/// Every recognized key with its default (empty = no default).
pub const KEYS: &[(&str, &str)] = &[
    ("source", "synthetic"),
    ("csv_path", ""),
    ("csv_true_labels", "false"),
    ("classes", "4"),
    ("per_class", "1375"),
    ("dim", "16"),
    ("spread", "1.0"),
    ("separation", "4.0"),
    ("validation_size", "500"),
    ("test_size", "1000"),
    ("noise", "pair"),
    ("tau", ""),
    ("hidden", "64,64"),
    ("epochs", "60"),
    ("lr", "0.1"),
    ("momentum", "0.9"),
    ("batch_size", "128"),
    ("decay_points", "0.5,0.75"),
    ("decay_factor", "5"),
    ("method", "prestopping"),
    ("heuristic", "validation"),
    ("q", "10"),
    ("epsilon", "0.05"),
    ("q_grid", "1,5,10,15,20"),
    ("master_seed", "0"),
    ("seeds", "0,1,2"),
    ("jobs", "1"),
    ("out", "runs"),
    ("histogram", "true"),
    ("plots", "false"),
    ("checkpoints", "false"),
];

fn config_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

/// Parses `key = value` text into raw pairs.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(config_err(
                "",
                format!("line {}: expected `key = value`, got `{line}`", n + 1),
            ));
        };
        let key = k.trim().to_string();
        if pairs.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(config_err(&key, format!("line {}: duplicate key", n + 1)));
        }
    }
    Ok(pairs)
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| config_err(key, format!("bad list element `{s}`")))
        })
        .collect()
}

impl ExperimentConfig {
    /// Built-in defaults.
    pub fn desk_default() -> Self {
        Self::from_pairs(&BTreeMap::new()).expect("defaults are valid")
    }

    pub fn from_file(path: &Path, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
        let mut pairs = parse_config_text(&text)?;
        pairs.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
        Self::from_pairs(&pairs)
    }

    /// Builds and validates a config from raw pairs layered over the defaults.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut values: BTreeMap<&str, String> =
            KEYS.iter().map(|(k, v)| (*k, v.to_string())).collect();
        for (k, v) in pairs {
            match values.get_mut(k.as_str()) {
                Some(slot) => *slot = v.clone(),
                None => return Err(config_err(k, "unknown key")),
            }
        }
        let get = |k: &str| values[k].as_str();
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| config_err(key, format!("cannot parse `{v}`")))
        }
        let boolean = |k: &str| -> Result<bool> {
            match get(k) {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                v => Err(config_err(k, format!("expected true/false, got `{v}`"))),
            }
        };

        let data = match get("source") {
            "synthetic" => DataSource::Synthetic {
                classes: num("classes", get("classes"))?,
                per_class: num("per_class", get("per_class"))?,
                dim: num("dim", get("dim"))?,
                spread: num("spread", get("spread"))?,
                separation: num("separation", get("separation"))?,
            },
            "csv" => {
                if get("csv_path").is_empty() {
                    return Err(config_err("csv_path", "required when source = csv"));
                }
                DataSource::Csv {
                    path: PathBuf::from(get("csv_path")),
                    true_label_column: boolean("csv_true_labels")?,
                    classes: if pairs.contains_key("classes") {
                        Some(num("classes", get("classes"))?)
                    } else {
                        None
                    },
                }
            }
            other => return Err(config_err("source", format!("unknown source `{other}`"))),
        };
        let tau = match get("tau") {
            "" => None,
            v => Some(num::<f64>("tau", v)?),
        };
        let noise: NoiseKind = get("noise").parse()?;
        let method: Method = get("method").parse()?;
        let heuristic: HeuristicKind = get("heuristic").parse()?;
        let q: usize = num("q", get("q"))?;
        let optimizer = OptimizerConfig {
            base_lr: num("lr", get("lr"))?,
            momentum: num("momentum", get("momentum"))?,
            batch_size: num("batch_size", get("batch_size"))?,
            total_epochs: num("epochs", get("epochs"))?,
            decay_points: parse_list("decay_points", get("decay_points"))?,
            decay_factor: num("decay_factor", get("decay_factor"))?,
        };
        let cfg = Self {
            data,
            validation_size: num("validation_size", get("validation_size"))?,
            test_size: num("test_size", get("test_size"))?,
            noise,
            tau,
            method,
            heuristic,
            q,
            epsilon: num("epsilon", get("epsilon"))?,
            q_grid: parse_list("q_grid", get("q_grid"))?,
            hidden: parse_list("hidden", get("hidden"))?,
            optimizer,
            master_seed: num("master_seed", get("master_seed"))?,
            seeds: parse_list("seeds", get("seeds"))?,
            jobs: num("jobs", get("jobs"))?,
            out: PathBuf::from(get("out")),
            histogram: boolean("histogram")?,
            plots: boolean("plots")?,
            checkpoints: boolean("checkpoints")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(1..=255).contains(&self.q) {
            return Err(config_err("q", "history length must be in 1..=255"));
        }
        if self.q_grid.iter().any(|q| !(1..=255).contains(q)) {
            return Err(config_err(
                "q_grid",
                "every history length must be in 1..=255",
            ));
        }
        if self.noise != NoiseKind::None && self.tau.is_none() {
            return Err(config_err(
                "tau",
                format!("required for `{}` noise", self.noise),
            ));
        }
        if let Some(t) = self.tau {
            if !(0.0..1.0).contains(&t) {
                return Err(config_err("tau", format!("{t} outside [0, 1)")));
            }
        }
        if self.method != Method::Default
            && self.heuristic == HeuristicKind::NoiseRate
            && self.tau.is_none()
        {
            return Err(config_err("tau", "required by the noise_rate heuristic"));
        }
        if self.method != Method::Default
            && self.heuristic == HeuristicKind::Validation
            && self.validation_size == 0
        {
            return Err(config_err(
                "validation_size",
                "the validation heuristic needs a validation set",
            ));
        }
        if self.test_size == 0 {
            return Err(config_err("test_size", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "need at least one seed"));
        }
        if self.jobs == 0 {
            return Err(config_err("jobs", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(config_err("epsilon", "must be in [0, 1]"));
        }
        if let DataSource::Synthetic { classes, dim, .. } = self.data {
            if classes < 2 {
                return Err(config_err("classes", "need at least 2"));
            }
            if dim < 2 {
                return Err(config_err("dim", "need at least 2"));
            }
        }
        Ok(())
    }

    /// Noise rate injected into the training labels.
    pub fn injected_tau(&self) -> f64 {
        if self.noise == NoiseKind::None {
            0.0
        } else {
            self.tau.unwrap_or(0.0)
        }
    }

    pub fn group_dir(&self) -> PathBuf {
        self.out
            .join(self.method.as_str())
            .join(format!("{}_{}", self.noise, self.injected_tau()))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.group_dir().join(format!("seed{seed}"))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer.clone(),
            q: self.q,
            shuffle_seed: derive_seed(self.master_seed, seed, "shuffle"),
        }
    }
}

/// The data of one seeded run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: NoisyDataset,
    pub validation: crate::data::LabeledView,
    pub test: crate::data::LabeledView,
}

pub fn build_data(cfg: &ExperimentConfig, seed: u64) -> Result<RunData> {
    let full = match &cfg.data {
        DataSource::Synthetic {
            classes,
            per_class,
            dim,
            spread,
            separation,
        } => synth_gaussian(&SynthSpec {
            classes: *classes,
            per_class: *per_class,
            dim: *dim,
            spread: *spread,
            separation: *separation,
            seed: derive_seed(cfg.master_seed, seed, "data"),
        })?,
        DataSource::Csv {
            path,
            true_label_column,
            classes,
        } => load_csv(
            path,
            &CsvOptions {
                classes: *classes,
                true_label_column: *true_label_column,
            },
        )?,
    };
    let parts = split(
        &full,
        &SplitSpec {
            validation_size: cfg.validation_size,
            test_size: cfg.test_size,
            seed: derive_seed(cfg.master_seed, seed, "split"),
        },
    )?;
    let train = if parts.train.is_noise_free() {
        apply_noise(
            &parts.train,
            cfg.noise,
            cfg.injected_tau(),
            derive_seed(cfg.master_seed, seed, "noise"),
        )?
    } else {
        parts.train
    };
    Ok(RunData {
        train,
        validation: parts.validation,
        test: parts.test,
    })
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub provenance: NoiseProvenance,
    /// The run's effective trajectory; rewound Phase I epochs are excluded.
    pub metrics: Vec<EpochMetrics>,
    /// Every Phase I epoch, including those past the stop point.
    pub phase1_trace: Vec<EpochMetrics>,
    /// For Prestopping+, the effective trajectory of the first run.
    pub base_metrics: Vec<EpochMetrics>,
    pub histogram: Option<(usize, LossHistogram)>,
    pub train_size: usize,
    pub false_labeled: usize,
    pub checkpoint: Option<Checkpoint>,
}

impl RunOutput {
    /// Memorized false-labeled samples over all false-labeled samples.
    pub fn memorized_false_fraction(&self, m: &EpochMetrics) -> f64 {
        if self.false_labeled == 0 {
            0.0
        } else {
            m.memorized_false_count as f64 / self.false_labeled as f64
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RunRecord {
    #[serde(flatten)]
    summary: RunSummary,
    noise_provenance: NoiseProvenance,
}

#[derive(Serialize, Deserialize)]
struct SummaryFile {
    runs: Vec<RunRecord>,
    aggregates: Vec<GroupSummary>,
}

fn collected(collector: &mut MetricsCollector<'_>) -> Result<()> {
    match collector.take_error() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Executes one seed of an experiment. Writes its output directory when
/// `out_dir` is given.
pub fn run_single(cfg: &ExperimentConfig, seed: u64, out_dir: Option<&Path>) -> Result<RunOutput> {
    let started = Instant::now();
    let data = build_data(cfg, seed)?;
    let train = &data.train;
    let view = train.training_view();
    let spec = NetworkSpec::mlp(train.dim(), &cfg.hidden, train.classes())?;
    let init_seed = derive_seed(cfg.master_seed, seed, "init");
    let tcfg = cfg.train_config(seed);
    let validation = (!data.validation.is_empty()).then_some(&data.validation);

    let mut collector = MetricsCollector::new(train, &data.test);
    if !cfg.histogram {
        collector = collector.without_histogram();
    }
    let mut stop_epoch = None;
    let mut checkpoint = None;
    let mut phase1_trace = Vec::new();
    let mut base_metrics = Vec::new();
    let mut refurbished = None;

    let metrics = match cfg.method {
        Method::Default => {
            run_default(
                &view,
                &tcfg,
                NetworkState::init(spec, init_seed),
                validation,
                &mut collector,
            )?;
            collected(&mut collector)?;
            collector.records.clone()
        }
        Method::Prestopping | Method::PrestoppingPlus => {
            let heuristic = match cfg.heuristic {
                HeuristicKind::Validation => StopHeuristic::Validation(&data.validation),
                HeuristicKind::NoiseRate => StopHeuristic::NoiseRate(cfg.tau.expect("validated")),
            };
            let out = run_prestopping(
                &view,
                heuristic,
                &tcfg,
                NetworkState::init(spec.clone(), init_seed),
                &mut collector,
            )?;
            collected(&mut collector)?;
            let stop = out.phase1.checkpoint.epoch;
            stop_epoch = Some(stop);
            phase1_trace = collector
                .records
                .iter()
                .filter(|m| m.phase == Phase::Phase1)
                .cloned()
                .collect();
            let effective: Vec<EpochMetrics> = collector
                .records
                .iter()
                .filter(|m| m.phase != Phase::Phase1 || m.epoch <= stop)
                .cloned()
                .collect();
            checkpoint = Some(out.phase1.checkpoint);
            if cfg.method == Method::Prestopping {
                effective
            } else {
                base_metrics = effective;
                let refurb_cfg = RefurbConfig::new(cfg.epsilon, out.phase2.safe_set)?;
                let mut plus_collector =
                    MetricsCollector::new(train, &data.test).without_histogram();
                let plus = run_prestopping_plus(
                    &view,
                    &refurb_cfg,
                    &tcfg,
                    NetworkState::init(spec, init_seed),
                    validation,
                    &mut plus_collector,
                )?;
                collected(&mut plus_collector)?;
                refurbished = Some(plus.refurbished);
                plus_collector.records
            }
        }
    };

    let provenance = train.provenance().clone();
    let summary = RunSummary {
        method: cfg.method.as_str().into(),
        heuristic: (cfg.method != Method::Default).then(|| cfg.heuristic.as_str().to_string()),
        noise: cfg.noise,
        tau: cfg.injected_tau(),
        q: cfg.q,
        seed,
        best_test_error: best_test_error(&metrics),
        stop_epoch,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let output = RunOutput {
        summary,
        provenance,
        metrics,
        phase1_trace,
        base_metrics,
        histogram: collector.histogram.take(),
        train_size: train.len(),
        false_labeled: train.clean_mask().iter().filter(|&&c| !c).count(),
        checkpoint,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_metrics_csv(&output.metrics, &dir.join("metrics.csv"))?;
        if !output.base_metrics.is_empty() {
            write_metrics_csv(&output.base_metrics, &dir.join("base_metrics.csv"))?;
        }
        if let Some((epoch, h)) = &output.histogram {
            h.write_csv(&dir.join(format!("hist_{epoch}.csv")))?;
        }
        if let Some(r) = &refurbished {
            write_audit_log(r, train, &dir.join("refurbish.csv"))?;
        }
        if cfg.checkpoints {
            if let Some(cp) = &output.checkpoint {
                write_checkpoint(
                    &cp.network,
                    std::fs::File::create(dir.join("checkpoint.pstp"))?,
                )?;
                cp.histories
                    .write_to(std::fs::File::create(dir.join("history.psth"))?)?;
            }
        }
        if cfg.plots {
            write_plot_script(&dir.join("plots.gp"))?;
        }
        write_summary_file(&dir.join("summary.json"), std::slice::from_ref(&output))?;
    }
    Ok(output)
}

fn write_summary_file(path: &Path, runs: &[RunOutput]) -> Result<()> {
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let file = SummaryFile {
        runs: runs
            .iter()
            .map(|r| RunRecord {
                summary: r.summary.clone(),
                noise_provenance: r.provenance.clone(),
            })
            .collect(),
        aggregates: summarize(&summaries),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Result of running every seed of one config.
#[derive(Debug)]
pub struct ExperimentReport {
    pub runs: Vec<RunOutput>,
    /// `(seed, error message)` for every failed seed.
    pub failures: Vec<(u64, String)>,
    pub aggregates: Vec<GroupSummary>,
}

impl ExperimentReport {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            1
        }
    }
}

/// Runs `jobs` closures at a time over `items`, returning results in order.
fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Runs every seed, writes per-seed outputs and the group summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let results = parallel_map(&cfg.seeds, cfg.jobs, |&seed| {
        let dir = cfg.seed_dir(seed);
        let r = run_single(cfg, seed, Some(&dir));
        if let Err(e) = &r {
            let _ = std::fs::create_dir_all(&dir);
            let _ = std::fs::write(dir.join("error.txt"), format!("{e}\n"));
        }
        (seed, r)
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(out) => runs.push(out),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    std::fs::create_dir_all(cfg.group_dir())?;
    write_summary_file(&cfg.group_dir().join("summary.json"), &runs)?;
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    Ok(ExperimentReport {
        aggregates: summarize(&summaries),
        runs,
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub q: usize,
    pub runs: usize,
    pub mean_best_test_error: f64,
    pub std_error: f64,
}

/// Repeats the experiment for each history length in `cfg.q_grid`, under
/// `<out>/q<q>/`, and writes `<out>/grid_q.csv`.
pub fn grid_search_q(cfg: &ExperimentConfig) -> Result<(Vec<GridRow>, Vec<(u64, String)>)> {
    if cfg.method == Method::Default {
        return Err(config_err(
            "method",
            "grid search over q needs prestopping or prestopping_plus",
        ));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &q in &cfg.q_grid {
        let point = ExperimentConfig {
            q,
            out: cfg.out.join(format!("q{q}")),
            ..cfg.clone()
        };
        let report = run_experiment(&point)?;
        failures.extend(report.failures);
        let values: Vec<f64> = report
            .runs
            .iter()
            .map(|r| r.summary.best_test_error)
            .collect();
        let (mean, se) = crate::instrumentation::mean_and_std_error(&values);
        rows.push(GridRow {
            q,
            runs: values.len(),
            mean_best_test_error: mean,
            std_error: se,
        });
    }
    std::fs::create_dir_all(&cfg.out)?;
    let mut csv = String::from("q,runs,mean_best_test_error,std_error\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:?},{:?}\n",
            r.q, r.runs, r.mean_best_test_error, r.std_error
        ));
    }
    std::fs::write(cfg.out.join("grid_q.csv"), csv)?;
    Ok((rows, failures))
}

/// Collects every per-seed `summary.json` under `dir`, writes the grouped
/// aggregates to `<dir>/summary.json` and returns them.
pub fn summarize_dir(dir: &Path) -> Result<Vec<GroupSummary>> {
    let mut records = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let is_seed_summary = entry.file_name() == "summary.json"
            && entry
                .path()
                .parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("seed"));
        if !is_seed_summary {
            continue;
        }
        let file: SummaryFile = serde_json::from_str(&std::fs::read_to_string(entry.path())?)?;
        records.extend(file.runs);
    }
    let summaries: Vec<RunSummary> = records.iter().map(|r| r.summary.clone()).collect();
    let aggregates = summarize(&summaries);
    let file = SummaryFile {
        runs: records,
        aggregates: aggregates.clone(),
    };
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&file)?,
    )?;
    Ok(aggregates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(kv: &[(&str, &str)]) -> BTreeMap<String, String> {
        kv.iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_are_desk_scale() {
        let cfg = ExperimentConfig::from_pairs(&pairs(&[("tau", "0.4")])).unwrap();
        assert_eq!(cfg.validation_size, 500);
        assert_eq!(cfg.test_size, 1000);
        assert_eq!(cfg.optimizer.total_epochs, 60);
        assert_eq!(cfg.q, 10);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.q_grid, vec![1, 5, 10, 15, 20]);
    }

    #[test]
    fn missing_tau_for_noise_rate_names_the_key() {
        let err = ExperimentConfig::from_pairs(&pairs(&[
            ("noise", "none"),
            ("method", "prestopping"),
            ("heuristic", "noise_rate"),
        ]))
        .unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "tau"),
            "{err}"
        );
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let err = ExperimentConfig::from_pairs(&pairs(&[("bogus", "1")])).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "bogus"));
        let err =
            ExperimentConfig::from_pairs(&pairs(&[("tau", "0.4"), ("q", "ten")])).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "q"));
        let err = ExperimentConfig::from_pairs(&pairs(&[("tau", "0.4"), ("method", "coteaching")]))
            .unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "method"));
    }

    #[test]
    fn config_text_sections_and_comments() {
        let p = parse_config_text(
            "# top\n[data]\nspread = 0.5 # inline\n\n[noise]\nnoise=pair\ntau=0.2\n",
        )
        .unwrap();
        assert_eq!(p["spread"], "0.5");
        assert_eq!(p["tau"], "0.2");
        assert!(parse_config_text("a = 1\na = 2\n").is_err());
        assert!(parse_config_text("novalue\n").is_err());
    }

    #[test]
    fn output_layout() {
        let cfg =
            ExperimentConfig::from_pairs(&pairs(&[("tau", "0.4"), ("out", "/tmp/x")])).unwrap();
        assert_eq!(
            cfg.seed_dir(2),
            PathBuf::from("/tmp/x/prestopping/pair_0.4/seed2")
        );
        let clean =
            ExperimentConfig::from_pairs(&pairs(&[("noise", "none"), ("method", "default")]))
                .unwrap();
        assert_eq!(clean.group_dir(), PathBuf::from("runs/default/none_0"));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<u64> = (0..10).collect();
        assert_eq!(
            parallel_map(&v, 3, |x| x * 2),
            v.iter().map(|x| x * 2).collect::<Vec<_>>()
        );
    }
}
