//! Prestopping+: a second run from a fresh network that trains on the final
//! maximal safe set with its noisy labels, plus the remaining samples whose
//! prediction history is confident enough to replace their label.
//!
//! Confidence is the normalized entropy of the history distribution,
//! `-sum_y P(y) ln P(y) / ln k`. A sample outside the trusted set is
//! refurbished to its majority label when that entropy is at most `epsilon`.

use std::io::Write;
use std::path::Path;

use crate::data::{LabeledView, NoisyDataset, TrainView};
use crate::engine::{
    epoch_order, make_batch, mean_weights, weighted_step, EpochContext, EpochObserver,
    MaximalSafeSet, Phase, TrainConfig,
};
use crate::error::{Error, Result};
use crate::memorization::PredictionHistory;
use crate::nn::{evaluate_error, Batch, NetworkState, OptimizerConfig};

pub const DEFAULT_EPSILON: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct RefurbConfig {
    /// Maximum normalized history entropy for refurbishment.
    pub epsilon: f64,
    /// `S_{t_end}` of the completed first run.
    pub trusted: MaximalSafeSet,
}

impl RefurbConfig {
    pub fn new(epsilon: f64, trusted: MaximalSafeSet) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config {
                key: "epsilon".into(),
                msg: format!("{epsilon} outside [0, 1]"),
            });
        }
        Ok(Self { epsilon, trusted })
    }
}

/// Per-sample refurbished labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RefurbishedSet {
    /// `Some((label, entropy))` for refurbished samples.
    entries: Vec<Option<(usize, f64)>>,
}

impl RefurbishedSet {
    pub fn empty(n: usize) -> Self {
        Self {
            entries: vec![None; n],
        }
    }

    pub fn from_entries(entries: Vec<Option<(usize, f64)>>) -> Self {
        Self { entries }
    }

    pub fn samples(&self) -> usize {
        self.entries.len()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.entries[i].map(|(y, _)| y)
    }

    pub fn entropy(&self, i: usize) -> Option<f64> {
        self.entries[i].map(|(_, u)| u)
    }

    pub fn len(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.map(|_| i))
            .collect()
    }

    pub fn is_disjoint_from(&self, trusted: &MaximalSafeSet) -> bool {
        self.indices().iter().all(|&i| !trusted.contains(i))
    }
}

/// Entropy of a label distribution divided by `ln k`.
pub fn normalized_entropy(probs: &[f64]) -> f64 {
    let k = probs.len();
    if k < 2 {
        return 0.0;
    }
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    (h / (k as f64).ln()).clamp(0.0, 1.0)
}

pub fn refurbish_candidates(
    histories: &PredictionHistory,
    config: &RefurbConfig,
) -> RefurbishedSet {
    let entries = (0..histories.samples())
        .map(|i| {
            if config.trusted.contains(i) {
                return None;
            }
            let dist = histories.distribution(i)?;
            let u = normalized_entropy(&dist);
            (u <= config.epsilon).then(|| (histories.majority(i).expect("nonempty history"), u))
        })
        .collect();
    RefurbishedSet { entries }
}

/// Labels and loss weights of one Prestopping+ step: trusted rows keep their
/// noisy label, refurbished rows take the refurbished label, and every row
/// in either set gets weight `1 / |union|`.
pub fn plus_targets(
    batch: &Batch,
    refurb: &RefurbishedSet,
    trusted: &MaximalSafeSet,
) -> (Vec<usize>, Vec<f64>) {
    let mut labels = Vec::with_capacity(batch.len());
    let mut used = Vec::with_capacity(batch.len());
    for (&i, &noisy) in batch.sample_indices.iter().zip(&batch.labels) {
        if trusted.contains(i) {
            labels.push(noisy);
            used.push(true);
        } else if let Some(y) = refurb.label(i) {
            labels.push(y);
            used.push(true);
        } else {
            labels.push(noisy);
            used.push(false);
        }
    }
    (labels, mean_weights(&used))
}

/// One Prestopping+ update. Returns whether parameters changed.
pub fn prestopping_plus_step(
    state: &mut NetworkState,
    histories: &mut PredictionHistory,
    batch: &Batch,
    refurb: &RefurbishedSet,
    trusted: &MaximalSafeSet,
    optimizer: &OptimizerConfig,
    epoch: usize,
) -> Result<bool> {
    let (labels, weights) = plus_targets(batch, refurb, trusted);
    weighted_step(
        state,
        histories,
        batch,
        &labels,
        &weights,
        optimizer,
        epoch,
        Phase::Plus,
        &mut (),
    )
}

#[derive(Clone, Debug)]
pub struct PlusOutcome {
    pub network: NetworkState,
    pub histories: PredictionHistory,
    /// Refurbished set after the final epoch.
    pub refurbished: RefurbishedSet,
}

/// Second run from `initial` (a freshly initialized network), histories
/// starting empty. The refurbished set is recomputed at every epoch start.
pub fn run_prestopping_plus(
    train: &TrainView<'_>,
    refurb_config: &RefurbConfig,
    config: &TrainConfig,
    initial: NetworkState,
    validation: Option<&LabeledView>,
    observer: &mut dyn EpochObserver,
) -> Result<PlusOutcome> {
    config.validate()?;
    if refurb_config.trusted.mask().len() != train.len() {
        return Err(Error::Shape(
            "trusted set does not match the training set".into(),
        ));
    }
    let mut state = initial;
    let mut histories = PredictionHistory::new(train.len(), config.q, train.classes())?;
    let trusted = &refurb_config.trusted;
    let mut refurb = refurbish_candidates(&histories, refurb_config);

    for epoch in 0..config.total_epochs() {
        assert!(
            refurb.is_disjoint_from(trusted),
            "refurbished labels overlap the trusted set"
        );
        let order = epoch_order(config.shuffle_seed, epoch, train.len());
        let mut skipped = 0;
        for chunk in order.chunks(config.optimizer.batch_size) {
            let batch = make_batch(train, chunk);
            let (labels, weights) = plus_targets(&batch, &refurb, trusted);
            let stepped = weighted_step(
                &mut state,
                &mut histories,
                &batch,
                &labels,
                &weights,
                &config.optimizer,
                epoch,
                Phase::Plus,
                observer,
            )?;
            skipped += usize::from(!stepped);
        }
        state.epoch = epoch + 1;
        refurb = refurbish_candidates(&histories, refurb_config);

        let err = evaluate_error(train.features(), train.noisy_labels(), &state)?;
        let val = validation
            .map(|v| evaluate_error(&v.features, &v.labels, &state))
            .transpose()?;
        let mut used = trusted.mask().to_vec();
        let mut labels = train.noisy_labels().to_vec();
        for i in refurb.indices() {
            used[i] = true;
            labels[i] = refurb.label(i).unwrap();
        }
        observer.on_epoch(&EpochContext {
            epoch: epoch + 1,
            phase: Phase::Plus,
            network: &state,
            histories: &histories,
            train_error: err,
            validation_error: val,
            lr: config.optimizer.lr_at(epoch),
            safe_set: Some(&used),
            training_labels: Some(&labels),
            skipped_batches: skipped,
        });
    }
    Ok(PlusOutcome {
        network: state,
        histories,
        refurbished: refurb,
    })
}

/// Audit log: `sample_index,noisy_label,refurbished_label,true_label,entropy`.
pub fn write_audit_log(refurb: &RefurbishedSet, train: &NoisyDataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "sample_index,noisy_label,refurbished_label,true_label,entropy"
    )?;
    for i in refurb.indices() {
        writeln!(
            out,
            "{i},{},{},{},{:.6}",
            train.noisy_labels()[i],
            refurb.label(i).unwrap(),
            train.true_labels()[i],
            refurb.entropy(i).unwrap()
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(rows: &[&[usize]], q: usize, k: usize) -> PredictionHistory {
        let mut h = PredictionHistory::new(rows.len(), q, k).unwrap();
        for (i, r) in rows.iter().enumerate() {
            for &y in *r {
                h.record(i, y).unwrap();
            }
        }
        h
    }

    #[test]
    fn unanimous_history_is_refurbished() {
        let h = history(&[&[2, 2, 2, 2]], 4, 4);
        let cfg = RefurbConfig::new(0.0, MaximalSafeSet::from_mask(vec![false])).unwrap();
        let r = refurbish_candidates(&h, &cfg);
        assert_eq!(r.label(0), Some(2));
        assert_eq!(r.entropy(0), Some(0.0));
    }

    #[test]
    fn uniform_history_needs_epsilon_one() {
        let h = history(&[&[0, 1, 2, 3]], 4, 4);
        let trusted = MaximalSafeSet::from_mask(vec![false]);
        let strict = RefurbConfig::new(0.99, trusted.clone()).unwrap();
        assert!(refurbish_candidates(&h, &strict).is_empty());
        let loose = RefurbConfig::new(1.0, trusted).unwrap();
        assert_eq!(refurbish_candidates(&h, &loose).label(0), Some(0));
    }

    #[test]
    fn trusted_and_empty_samples_are_skipped() {
        let h = history(&[&[1, 1], &[], &[3, 3]], 4, 4);
        let cfg =
            RefurbConfig::new(0.5, MaximalSafeSet::from_mask(vec![true, false, false])).unwrap();
        let r = refurbish_candidates(&h, &cfg);
        assert_eq!(r.indices(), vec![2]);
        assert!(r.is_disjoint_from(&cfg.trusted));
    }

    #[test]
    fn epsilon_range_checked() {
        assert!(RefurbConfig::new(1.5, MaximalSafeSet::from_mask(vec![])).is_err());
    }

    #[test]
    fn entropy_bounds() {
        assert_eq!(normalized_entropy(&[1.0, 0.0, 0.0]), 0.0);
        assert!((normalized_entropy(&[0.25; 4]) - 1.0).abs() < 1e-15);
    }
}
