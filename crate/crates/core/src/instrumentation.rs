//! Per-epoch metrics, loss histograms and run summaries.
//!
//! This is the evaluation boundary: the collector holds the training set's
//! true labels and the clean test set, and turns the engine's
//! [`EpochContext`] reports into [`EpochMetrics`] rows.
//!
//! Conventions: MP of an empty memorized set is 1.0, and so is the
//! precision of an empty safe set. Outside Phase II / Prestopping+ there is
//! no safe set and `safe_set_size` is 0.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledView, NoiseKind, NoisyDataset};
use crate::engine::{EpochContext, EpochObserver, Phase};
use crate::error::{Error, Result};
use crate::memorization::mp_mr;
use crate::nn::{evaluate_error, per_sample_losses, NetworkState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_error: f64,
    pub validation_error: Option<f64>,
    pub test_error: f64,
    pub mp: f64,
    pub mr: f64,
    pub safe_set_size: usize,
    pub memorized_true_count: usize,
    pub memorized_false_count: usize,
    pub safe_set_precision: f64,
    pub lr: f64,
    pub phase: Phase,
}

pub const METRICS_HEADER: &str =
    "epoch,train_error,validation_error,test_error,mp,mr,safe_set_size,\
memorized_true_count,memorized_false_count,safe_set_precision,lr,phase";

impl EpochMetrics {
    pub fn memorized_count(&self) -> usize {
        self.memorized_true_count + self.memorized_false_count
    }
}

/// Builds one metrics row. True labels are read here and nowhere else.
pub fn snapshot_epoch(
    ctx: &EpochContext<'_>,
    train: &NoisyDataset,
    test: &LabeledView,
) -> Result<EpochMetrics> {
    let memorized = ctx.histories.memorization(train.noisy_labels());
    let m = mp_mr(&memorized, train.noisy_labels(), train.true_labels());
    let (safe_set_size, safe_set_precision) = match ctx.safe_set {
        Some(mask) => {
            let labels = ctx.training_labels.unwrap_or(train.noisy_labels());
            let mut size = 0;
            let mut correct = 0;
            for (i, _) in mask.iter().enumerate().filter(|(_, &s)| s) {
                size += 1;
                correct += usize::from(labels[i] == train.true_labels()[i]);
            }
            let precision = if size == 0 {
                1.0
            } else {
                correct as f64 / size as f64
            };
            (size, precision)
        }
        None => (0, 1.0),
    };
    let test_error = if test.is_empty() {
        f64::NAN
    } else {
        evaluate_error(&test.features, &test.labels, ctx.network)?
    };
    Ok(EpochMetrics {
        epoch: ctx.epoch,
        train_error: ctx.train_error,
        validation_error: ctx.validation_error,
        test_error,
        mp: m.precision,
        mr: m.recall,
        safe_set_size,
        memorized_true_count: m.memorized_true,
        memorized_false_count: m.memorized_false,
        safe_set_precision,
        lr: ctx.lr,
        phase: ctx.phase,
    })
}

/// Loss distributions of clean and noisy training samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LossHistogram {
    /// `bins + 1` edges, log-spaced.
    pub edges: Vec<f64>,
    pub clean_counts: Vec<usize>,
    pub noisy_counts: Vec<usize>,
}

pub const HIST_BINS: usize = 50;
pub const HIST_RANGE: (f64, f64) = (1e-6, 20.0);

impl LossHistogram {
    /// Bins per-sample losses; out-of-range values go to the end bins.
    pub fn from_losses(losses: &[f64], clean: &[bool], bins: usize, range: (f64, f64)) -> Self {
        let (lo, hi) = (range.0.ln(), range.1.ln());
        let edges: Vec<f64> = (0..=bins)
            .map(|b| (lo + (hi - lo) * b as f64 / bins as f64).exp())
            .collect();
        let mut clean_counts = vec![0; bins];
        let mut noisy_counts = vec![0; bins];
        for (&l, &c) in losses.iter().zip(clean) {
            let pos = if l <= range.0 {
                0
            } else {
                (((l.ln() - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
            };
            if c {
                clean_counts[pos] += 1;
            } else {
                noisy_counts[pos] += 1;
            }
        }
        Self {
            edges,
            clean_counts,
            noisy_counts,
        }
    }

    fn normalized(counts: &[usize]) -> Vec<f64> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return vec![0.0; counts.len()];
        }
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    pub fn clean_density(&self) -> Vec<f64> {
        Self::normalized(&self.clean_counts)
    }

    pub fn noisy_density(&self) -> Vec<f64> {
        Self::normalized(&self.noisy_counts)
    }

    /// Sum over bins of the smaller normalized mass.
    pub fn overlap(&self) -> f64 {
        self.clean_density()
            .iter()
            .zip(self.noisy_density())
            .map(|(a, b)| a.min(b))
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "bin_left,bin_right,clean_density,noisy_density")?;
        for (b, (c, n)) in self
            .clean_density()
            .iter()
            .zip(self.noisy_density())
            .enumerate()
        {
            writeln!(
                out,
                "{:?},{:?},{c:?},{n:?}",
                self.edges[b],
                self.edges[b + 1]
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-sample losses on the noisy labels, split by whether the label is clean.
pub fn loss_histogram(
    train: &NoisyDataset,
    state: &NetworkState,
    bins: usize,
) -> Result<LossHistogram> {
    let losses = per_sample_losses(train.features(), train.noisy_labels(), state)?;
    Ok(LossHistogram::from_losses(
        &losses,
        &train.clean_mask(),
        bins,
        HIST_RANGE,
    ))
}

/// Observer that records one [`EpochMetrics`] row per epoch, and the loss
/// histogram at the first epoch whose training error drops below 0.5.
pub struct MetricsCollector<'a> {
    train: &'a NoisyDataset,
    test: &'a LabeledView,
    pub records: Vec<EpochMetrics>,
    pub histogram: Option<(usize, LossHistogram)>,
    capture_histogram: bool,
    error: Option<Error>,
}

impl<'a> MetricsCollector<'a> {
    pub fn new(train: &'a NoisyDataset, test: &'a LabeledView) -> Self {
        Self {
            train,
            test,
            records: Vec::new(),
            histogram: None,
            capture_histogram: true,
            error: None,
        }
    }

    pub fn without_histogram(mut self) -> Self {
        self.capture_histogram = false;
        self
    }

    /// First evaluation error raised inside the observer, if any.
    pub fn take_error(&mut self) -> Option<Error> {
        self.error.take()
    }
}

impl EpochObserver for MetricsCollector<'_> {
    fn on_epoch(&mut self, ctx: &EpochContext<'_>) {
        match snapshot_epoch(ctx, self.train, self.test) {
            Ok(m) => self.records.push(m),
            Err(e) => {
                self.error.get_or_insert(e);
                return;
            }
        }
        if self.capture_histogram
            && self.histogram.is_none()
            && ctx.phase == Phase::Phase1
            && ctx.train_error < 0.5
        {
            match loss_histogram(self.train, ctx.network, HIST_BINS) {
                Ok(h) => self.histogram = Some((ctx.epoch, h)),
                Err(e) => {
                    self.error.get_or_insert(e);
                }
            }
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_metrics_csv(records: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{METRICS_HEADER}")?;
    for m in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            m.epoch,
            fmt_f64(m.train_error),
            m.validation_error.map(fmt_f64).unwrap_or_default(),
            fmt_f64(m.test_error),
            fmt_f64(m.mp),
            fmt_f64(m.mr),
            m.safe_set_size,
            m.memorized_true_count,
            m.memorized_false_count,
            fmt_f64(m.safe_set_precision),
            fmt_f64(m.lr),
            m.phase.as_str()
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(perr(1, "missing or unexpected header".into())),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        let line_no = n + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 12 {
            return Err(perr(
                line_no,
                format!("expected 12 columns, found {}", cells.len()),
            ));
        }
        let f = |i: usize| -> Result<f64> {
            cells[i]
                .parse::<f64>()
                .map_err(|_| perr(line_no, format!("bad number `{}`", cells[i])))
        };
        let u = |i: usize| -> Result<usize> {
            cells[i]
                .parse::<usize>()
                .map_err(|_| perr(line_no, format!("bad count `{}`", cells[i])))
        };
        let phase = match cells[11] {
            "phase1" => Phase::Phase1,
            "phase2" => Phase::Phase2,
            "plus" => Phase::Plus,
            other => return Err(perr(line_no, format!("unknown phase `{other}`"))),
        };
        out.push(EpochMetrics {
            epoch: u(0)?,
            train_error: f(1)?,
            validation_error: if cells[2].is_empty() {
                None
            } else {
                Some(f(2)?)
            },
            test_error: f(3)?,
            mp: f(4)?,
            mr: f(5)?,
            safe_set_size: u(6)?,
            memorized_true_count: u(7)?,
            memorized_false_count: u(8)?,
            safe_set_precision: f(9)?,
            lr: f(10)?,
            phase,
        });
    }
    Ok(out)
}

/// Minimum test error over the records; `NaN` when there are none.
pub fn best_test_error(records: &[EpochMetrics]) -> f64 {
    records
        .iter()
        .map(|m| m.test_error)
        .fold(f64::NAN, f64::min)
}

/// First epoch where MR reaches MP. If the curves never cross, the epoch
/// minimizing `|MP - MR|`.
pub fn mp_mr_cross_epoch(records: &[EpochMetrics]) -> Option<usize> {
    records
        .iter()
        .find(|m| m.mr >= m.mp)
        .map(|m| m.epoch)
        .or_else(|| {
            records
                .iter()
                .min_by(|a, b| (a.mp - a.mr).abs().total_cmp(&(b.mp - b.mr).abs()))
                .map(|m| m.epoch)
        })
}

/// Summary of one finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub heuristic: Option<String>,
    pub noise: NoiseKind,
    pub tau: f64,
    pub q: usize,
    pub seed: u64,
    pub best_test_error: f64,
    pub stop_epoch: Option<usize>,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: String,
    pub heuristic: Option<String>,
    pub noise: NoiseKind,
    pub tau: f64,
    pub q: usize,
    pub runs: usize,
    pub mean_best_test_error: f64,
    pub std_error: f64,
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`, 0 for
/// a single run) of `best_test_error`, grouped by method, heuristic, noise
/// type, noise rate and history length.
pub fn summarize(runs: &[RunSummary]) -> Vec<GroupSummary> {
    type Key = (String, Option<String>, &'static str, u64, usize);
    let mut groups: BTreeMap<Key, (NoiseKind, f64, Vec<f64>)> = BTreeMap::new();
    for r in runs {
        let key = (
            r.method.clone(),
            r.heuristic.clone(),
            r.noise.as_str(),
            r.tau.to_bits(),
            r.q,
        );
        groups
            .entry(key)
            .or_insert_with(|| (r.noise, r.tau, Vec::new()))
            .2
            .push(r.best_test_error);
    }
    groups
        .into_iter()
        .map(|((method, heuristic, _, _, q), (noise, tau, values))| {
            let (mean, se) = mean_and_std_error(&values);
            GroupSummary {
                method,
                heuristic,
                noise,
                tau,
                q,
                runs: values.len(),
                mean_best_test_error: mean,
                std_error: se,
            }
        })
        .collect()
}

pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// gnuplot script plotting the error and MP/MR curves of `metrics.csv`.
pub fn write_plot_script(path: &Path) -> Result<()> {
    let script = "\
set datafile separator ','
set key autotitle columnhead
set xlabel 'epoch'
set multiplot layout 2,1
plot 'metrics.csv' using 1:2 with lines title 'train error', \\
     '' using 1:4 with lines title 'test error'
plot 'metrics.csv' using 1:5 with lines title 'MP', \\
     '' using 1:6 with lines title 'MR'
unset multiplot
";
    std::fs::write(path, script)?;
    Ok(())
}
