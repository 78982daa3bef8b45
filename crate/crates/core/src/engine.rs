//! Two-phase trainer.
//!
//! Phase I is ordinary mini-batch training on the noisy labels while a stop
//! heuristic watches for the early stop point. Phase II restores the network
//! and prediction histories captured at that point and keeps training, but
//! each update only uses the batch members that are currently memorized
//! (the maximal safe set). All other batch members are still forward-passed
//! so their histories keep updating and the safe set can grow.
//!
//! Nothing here can see true labels: trainers take a [`TrainView`] and report
//! progress through [`EpochObserver`], which is where evaluation happens.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledView, TrainView};
use crate::error::{Error, Result};
use crate::memorization::PredictionHistory;
use crate::nn::{
    evaluate_error, sgd_step, weighted_loss_and_grad, Batch, NetworkState, OptimizerConfig,
};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Phase1,
    Phase2,
    Plus,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
            Phase::Plus => "plus",
        }
    }
}

/// How Phase I decides where to stop.
#[derive(Clone, Copy, Debug)]
pub enum StopHeuristic<'a> {
    /// Keep the network with the lowest error on a clean validation set.
    Validation(&'a LabeledView),
    /// Stop at the first epoch whose training error is at most the noise rate.
    NoiseRate(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// History length.
    pub q: usize,
    /// Seed of the per-epoch shuffle stream.
    pub shuffle_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.q == 0 || self.q > 255 {
            return Err(Error::Config {
                key: "q".into(),
                msg: "history length must be in 1..=255".into(),
            });
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.optimizer.total_epochs
    }
}

/// Sample order for the epoch with 0-based index `epoch`. Depends only on
/// the seed and the epoch, so every method sees the same batches.
pub fn epoch_order(shuffle_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(shuffle_seed, epoch as u64, "shuffle"));
    order
}

pub fn make_batch(train: &TrainView<'_>, indices: &[usize]) -> Batch {
    Batch {
        sample_indices: indices.to_vec(),
        features: train.features().gather_rows(indices),
        labels: indices.iter().map(|&i| train.noisy_labels()[i]).collect(),
    }
}

/// Per-epoch report handed to observers.
pub struct EpochContext<'a> {
    /// Completed epochs, starting at 1.
    pub epoch: usize,
    pub phase: Phase,
    pub network: &'a NetworkState,
    pub histories: &'a PredictionHistory,
    /// Error against the noisy labels over the whole training set.
    pub train_error: f64,
    pub validation_error: Option<f64>,
    pub lr: f64,
    /// Training-set membership of the samples the updates are restricted to,
    /// at the end of the epoch. `None` in unrestricted training.
    pub safe_set: Option<&'a [bool]>,
    /// Labels the restricted updates use, when they differ from the noisy
    /// labels (refurbished training).
    pub training_labels: Option<&'a [usize]>,
    /// Batches whose restricted subset was empty.
    pub skipped_batches: usize,
}

/// One parameter update, exposed for auditing.
pub struct StepContext<'a> {
    pub phase: Phase,
    /// 0-based epoch index.
    pub epoch: usize,
    pub batch: &'a Batch,
    /// Per-row loss weights actually used.
    pub weights: &'a [f64],
    /// Per-row labels actually used.
    pub labels: &'a [usize],
    pub before: &'a NetworkState,
    pub after: &'a NetworkState,
    pub stepped: bool,
}

pub trait EpochObserver {
    fn on_epoch(&mut self, _ctx: &EpochContext<'_>) {}

    /// Whether [`on_step`](Self::on_step) should be called; steps are only
    /// audited on request since it costs a parameter copy per batch.
    fn wants_steps(&self) -> bool {
        false
    }

    fn on_step(&mut self, _ctx: &StepContext<'_>) {}
}

impl EpochObserver for () {}

/// Everything needed to resume from the early stop point.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkState,
    pub histories: PredictionHistory,
    /// Completed epochs at the stop point.
    pub epoch: usize,
    /// The validation or training error that triggered the save.
    pub trigger_value: f64,
}

/// Indices of the currently memorized training samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaximalSafeSet {
    pub indices: Vec<usize>,
    mask: Vec<bool>,
}

impl MaximalSafeSet {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let indices = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        Self { indices, mask }
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut mask = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            mask[i] = true;
        }
        Ok(Self::from_mask(mask))
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask.get(i).copied().unwrap_or(false)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

/// `{i : argmax_y P(y | x_i) = noisy_i}`.
pub fn compute_safe_set(histories: &PredictionHistory, train: &TrainView<'_>) -> MaximalSafeSet {
    let mask = (0..train.len())
        .map(|i| histories.is_memorized(i, train.noisy_labels()[i]))
        .collect();
    MaximalSafeSet::from_mask(mask)
}

/// Forward-passes the batch, records every row's prediction, and applies a
/// momentum step on the weighted loss unless all weights are zero.
/// Returns whether parameters changed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn weighted_step(
    state: &mut NetworkState,
    histories: &mut PredictionHistory,
    batch: &Batch,
    labels: &[usize],
    weights: &[f64],
    optimizer: &OptimizerConfig,
    epoch: usize,
    phase: Phase,
    observer: &mut dyn EpochObserver,
) -> Result<bool> {
    let lg = weighted_loss_and_grad(&batch.features, labels, weights, state)?;
    for (&i, &p) in batch.sample_indices.iter().zip(&lg.predictions) {
        histories.record(i, p)?;
    }
    let active = weights.iter().any(|&w| w != 0.0);
    let before = (active && observer.wants_steps()).then(|| state.clone());
    if active {
        sgd_step(state, &lg.grad, optimizer, epoch)?;
        if !state.params.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters diverged in epoch {}",
                epoch + 1
            )));
        }
    }
    if observer.wants_steps() {
        let before_ref = before.as_ref().unwrap_or(state);
        observer.on_step(&StepContext {
            phase,
            epoch,
            batch,
            weights,
            labels,
            before: before_ref,
            after: state,
            stepped: active,
        });
    }
    Ok(active)
}

/// Plain update over the whole batch with mean loss.
pub fn default_step(
    state: &mut NetworkState,
    histories: &mut PredictionHistory,
    batch: &Batch,
    optimizer: &OptimizerConfig,
    epoch: usize,
) -> Result<()> {
    let w = 1.0 / batch.len() as f64;
    let weights = vec![w; batch.len()];
    weighted_step(
        state,
        histories,
        batch,
        &batch.labels,
        &weights,
        optimizer,
        epoch,
        Phase::Phase1,
        &mut (),
    )?;
    Ok(())
}

/// Update restricted to batch rows in `safe`, with mean over `|S ∩ B|`.
/// Returns whether an update happened.
pub fn phase2_step(
    state: &mut NetworkState,
    histories: &mut PredictionHistory,
    batch: &Batch,
    safe: &[bool],
    optimizer: &OptimizerConfig,
    epoch: usize,
) -> Result<bool> {
    let rows: Vec<bool> = batch.sample_indices.iter().map(|&i| safe[i]).collect();
    weighted_step(
        state,
        histories,
        batch,
        &batch.labels,
        &mean_weights(&rows),
        optimizer,
        epoch,
        Phase::Phase2,
        &mut (),
    )
}

/// Weight `1 / count` on selected rows, zero elsewhere.
pub(crate) fn mean_weights(rows: &[bool]) -> Vec<f64> {
    let members = rows.iter().filter(|&&s| s).count();
    let w = if members == 0 {
        0.0
    } else {
        1.0 / members as f64
    };
    rows.iter().map(|&s| if s { w } else { 0.0 }).collect()
}

fn unrestricted_epoch(
    state: &mut NetworkState,
    histories: &mut PredictionHistory,
    train: &TrainView<'_>,
    config: &TrainConfig,
    epoch: usize,
    observer: &mut dyn EpochObserver,
) -> Result<()> {
    let order = epoch_order(config.shuffle_seed, epoch, train.len());
    for chunk in order.chunks(config.optimizer.batch_size) {
        let batch = make_batch(train, chunk);
        let w = 1.0 / batch.len() as f64;
        let weights = vec![w; batch.len()];
        weighted_step(
            state,
            histories,
            &batch,
            &batch.labels,
            &weights,
            &config.optimizer,
            epoch,
            Phase::Phase1,
            observer,
        )?;
    }
    state.epoch = epoch + 1;
    Ok(())
}

fn train_error(state: &NetworkState, train: &TrainView<'_>) -> Result<f64> {
    evaluate_error(train.features(), train.noisy_labels(), state)
}

fn check_inputs(train: &TrainView<'_>, config: &TrainConfig, state: &NetworkState) -> Result<()> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Domain("empty training set".into()));
    }
    if state.spec.input_dim() != train.features().cols()
        || state.spec.num_classes() != train.classes()
    {
        return Err(Error::Shape(format!(
            "network {:?} does not fit data of width {} with {} classes",
            state.spec.layer_sizes,
            train.features().cols(),
            train.classes()
        )));
    }
    Ok(())
}

/// Outcome of Phase I.
#[derive(Clone, Debug)]
pub struct Phase1Outcome {
    pub checkpoint: Checkpoint,
    /// Epochs actually trained (all of them for the validation heuristic).
    pub epochs_run: usize,
}

/// Standard training with early-stop detection.
///
/// With the validation heuristic every epoch runs and the checkpoint is the
/// first epoch attaining the minimum validation error. With the noise-rate
/// heuristic training stops at the first epoch whose end-of-epoch training
/// error is at most `tau`; if that never happens the run fails.
pub fn phase1_train(
    train: &TrainView<'_>,
    heuristic: StopHeuristic<'_>,
    config: &TrainConfig,
    initial: NetworkState,
    observer: &mut dyn EpochObserver,
) -> Result<Phase1Outcome> {
    check_inputs(train, config, &initial)?;
    if let StopHeuristic::Validation(v) = heuristic {
        if v.is_empty() {
            return Err(Error::Config {
                key: "validation_size".into(),
                msg: "validation heuristic needs a nonempty validation set".into(),
            });
        }
    }
    let mut state = initial;
    let mut histories = PredictionHistory::new(train.len(), config.q, train.classes())?;
    let mut best: Option<Checkpoint> = None;
    let mut last_train_error = f64::NAN;

    for epoch in 0..config.total_epochs() {
        unrestricted_epoch(&mut state, &mut histories, train, config, epoch, observer)?;
        let err = train_error(&state, train)?;
        last_train_error = err;
        let val = match heuristic {
            StopHeuristic::Validation(v) => Some(evaluate_error(&v.features, &v.labels, &state)?),
            StopHeuristic::NoiseRate(_) => None,
        };
        observer.on_epoch(&EpochContext {
            epoch: epoch + 1,
            phase: Phase::Phase1,
            network: &state,
            histories: &histories,
            train_error: err,
            validation_error: val,
            lr: config.optimizer.lr_at(epoch),
            safe_set: None,
            training_labels: None,
            skipped_batches: 0,
        });
        match heuristic {
            StopHeuristic::Validation(_) => {
                let v = val.unwrap();
                if best.as_ref().is_none_or(|b| v < b.trigger_value) {
                    best = Some(Checkpoint {
                        network: state.clone(),
                        histories: histories.clone(),
                        epoch: epoch + 1,
                        trigger_value: v,
                    });
                }
            }
            StopHeuristic::NoiseRate(tau) => {
                if err <= tau {
                    return Ok(Phase1Outcome {
                        checkpoint: Checkpoint {
                            network: state,
                            histories,
                            epoch: epoch + 1,
                            trigger_value: err,
                        },
                        epochs_run: epoch + 1,
                    });
                }
            }
        }
    }
    match (heuristic, best) {
        (StopHeuristic::Validation(_), Some(checkpoint)) => Ok(Phase1Outcome {
            checkpoint,
            epochs_run: config.total_epochs(),
        }),
        (StopHeuristic::NoiseRate(tau), _) => Err(Error::HeuristicNotTriggered {
            final_train_error: last_train_error,
            tau,
        }),
        (StopHeuristic::Validation(_), None) => unreachable!("at least one epoch runs"),
    }
}

#[derive(Clone, Debug)]
pub struct Phase2Outcome {
    pub network: NetworkState,
    pub histories: PredictionHistory,
    /// `S_{t_end}`.
    pub safe_set: MaximalSafeSet,
    /// Epochs during which every batch had an empty safe subset.
    pub empty_epochs: usize,
}

/// Resumes from the checkpoint and trains on the maximal safe set until
/// `total_epochs`. The learning-rate schedule continues on the global epoch
/// clock.
pub fn phase2_train(
    checkpoint: &Checkpoint,
    train: &TrainView<'_>,
    config: &TrainConfig,
    validation: Option<&LabeledView>,
    observer: &mut dyn EpochObserver,
) -> Result<Phase2Outcome> {
    check_inputs(train, config, &checkpoint.network)?;
    if checkpoint.histories.samples() != train.len() {
        return Err(Error::Shape(
            "checkpoint histories do not match the training set".into(),
        ));
    }
    let mut state = checkpoint.network.clone();
    let mut histories = checkpoint.histories.clone();
    let mut empty_epochs = 0;

    for epoch in checkpoint.epoch..config.total_epochs() {
        let order = epoch_order(config.shuffle_seed, epoch, train.len());
        let mut skipped = 0;
        let mut batches = 0;
        for chunk in order.chunks(config.optimizer.batch_size) {
            let batch = make_batch(train, chunk);
            // S_t restricted to this batch, from histories before this step.
            let safe: Vec<bool> = batch
                .sample_indices
                .iter()
                .zip(&batch.labels)
                .map(|(&i, &y)| histories.is_memorized(i, y))
                .collect();
            let weights = mean_weights(&safe);
            let stepped = weighted_step(
                &mut state,
                &mut histories,
                &batch,
                &batch.labels,
                &weights,
                &config.optimizer,
                epoch,
                Phase::Phase2,
                observer,
            )?;
            skipped += usize::from(!stepped);
            batches += 1;
        }
        if skipped == batches {
            empty_epochs += 1;
        }
        state.epoch = epoch + 1;
        let err = train_error(&state, train)?;
        let val = validation
            .map(|v| evaluate_error(&v.features, &v.labels, &state))
            .transpose()?;
        let safe_now = compute_safe_set(&histories, train);
        observer.on_epoch(&EpochContext {
            epoch: epoch + 1,
            phase: Phase::Phase2,
            network: &state,
            histories: &histories,
            train_error: err,
            validation_error: val,
            lr: config.optimizer.lr_at(epoch),
            safe_set: Some(safe_now.mask()),
            training_labels: None,
            skipped_batches: skipped,
        });
    }
    let safe_set = compute_safe_set(&histories, train);
    Ok(Phase2Outcome {
        network: state,
        histories,
        safe_set,
        empty_epochs,
    })
}

/// Standard training for all epochs, no noise handling.
pub fn run_default(
    train: &TrainView<'_>,
    config: &TrainConfig,
    initial: NetworkState,
    validation: Option<&LabeledView>,
    observer: &mut dyn EpochObserver,
) -> Result<(NetworkState, PredictionHistory)> {
    check_inputs(train, config, &initial)?;
    let mut state = initial;
    let mut histories = PredictionHistory::new(train.len(), config.q, train.classes())?;
    for epoch in 0..config.total_epochs() {
        unrestricted_epoch(&mut state, &mut histories, train, config, epoch, observer)?;
        let err = train_error(&state, train)?;
        let val = validation
            .map(|v| evaluate_error(&v.features, &v.labels, &state))
            .transpose()?;
        observer.on_epoch(&EpochContext {
            epoch: epoch + 1,
            phase: Phase::Phase1,
            network: &state,
            histories: &histories,
            train_error: err,
            validation_error: val,
            lr: config.optimizer.lr_at(epoch),
            safe_set: None,
            training_labels: None,
            skipped_batches: 0,
        });
    }
    Ok((state, histories))
}

/// Full Prestopping run.
#[derive(Clone, Debug)]
pub struct PrestoppingOutcome {
    pub phase1: Phase1Outcome,
    pub phase2: Phase2Outcome,
}

pub fn run_prestopping(
    train: &TrainView<'_>,
    heuristic: StopHeuristic<'_>,
    config: &TrainConfig,
    initial: NetworkState,
    observer: &mut dyn EpochObserver,
) -> Result<PrestoppingOutcome> {
    let phase1 = phase1_train(train, heuristic, config, initial, observer)?;
    let validation = match heuristic {
        StopHeuristic::Validation(v) => Some(v),
        StopHeuristic::NoiseRate(_) => None,
    };
    let phase2 = phase2_train(&phase1.checkpoint, train, config, validation, observer)?;
    Ok(PrestoppingOutcome { phase1, phase2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::nn::NetworkSpec;

    fn separable() -> (Matrix, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let t = i as f64 / 40.0;
            rows.push(vec![1.0 + t, 0.5 - t]);
            labels.push(0);
            rows.push(vec![-1.0 - t, t - 0.5]);
            labels.push(1);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig {
                base_lr: 0.05,
                momentum: 0.9,
                batch_size: 16,
                total_epochs: epochs,
                decay_points: vec![0.5, 0.75],
                decay_factor: 5.0,
            },
            q: 3,
            shuffle_seed: 5,
        }
    }

    #[test]
    fn noise_rate_zero_stops_at_first_perfect_epoch() {
        let (x, y) = separable();
        let view = TrainView::new(&x, &y, 2).unwrap();
        let net = NetworkState::init(NetworkSpec::new(vec![2, 8, 2]).unwrap(), 1);
        struct Errs(Vec<f64>);
        impl EpochObserver for Errs {
            fn on_epoch(&mut self, ctx: &EpochContext<'_>) {
                self.0.push(ctx.train_error);
            }
        }
        let mut errs = Errs(Vec::new());
        let out = phase1_train(
            &view,
            StopHeuristic::NoiseRate(0.0),
            &config(30),
            net,
            &mut errs,
        )
        .unwrap();
        let first_zero = errs.0.iter().position(|&e| e == 0.0).unwrap() + 1;
        assert_eq!(out.checkpoint.epoch, first_zero);
        assert_eq!(errs.0.len(), first_zero);
        assert_eq!(out.checkpoint.trigger_value, 0.0);
    }

    #[test]
    fn noise_rate_never_triggered_is_an_error() {
        let (x, mut y) = separable();
        // Unlearnable labels: half of each cluster flipped.
        for (i, l) in y.iter_mut().enumerate() {
            if i % 4 < 2 {
                *l = 1 - *l;
            }
        }
        let view = TrainView::new(&x, &y, 2).unwrap();
        let net = NetworkState::init(NetworkSpec::new(vec![2, 2]).unwrap(), 1);
        let err = phase1_train(
            &view,
            StopHeuristic::NoiseRate(0.0),
            &config(3),
            net,
            &mut (),
        )
        .unwrap_err();
        assert!(matches!(err, Error::HeuristicNotTriggered { .. }));
    }

    #[test]
    fn safe_set_extremes() {
        let (x, y) = separable();
        let view = TrainView::new(&x, &y, 2).unwrap();
        let mut agree = PredictionHistory::new(y.len(), 3, 2).unwrap();
        let mut disagree = agree.clone();
        for (i, &l) in y.iter().enumerate() {
            agree.record(i, l).unwrap();
            disagree.record(i, 1 - l).unwrap();
        }
        assert_eq!(compute_safe_set(&agree, &view).len(), y.len());
        assert!(compute_safe_set(&disagree, &view).is_empty());
    }

    #[test]
    fn full_safe_set_phase2_step_equals_default_step() {
        let (x, y) = separable();
        let view = TrainView::new(&x, &y, 2).unwrap();
        let net = NetworkState::init(NetworkSpec::new(vec![2, 6, 2]).unwrap(), 3);
        let cfg = config(4);
        let batch = make_batch(&view, &[3, 17, 40, 8, 61]);
        let mut h1 = PredictionHistory::new(y.len(), 3, 2).unwrap();
        let mut h2 = h1.clone();
        let mut a = net.clone();
        let mut b = net;
        default_step(&mut a, &mut h1, &batch, &cfg.optimizer, 0).unwrap();
        phase2_step(
            &mut b,
            &mut h2,
            &batch,
            &vec![true; y.len()],
            &cfg.optimizer,
            0,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(h1, h2);
    }

    #[test]
    fn empty_intersection_leaves_parameters_alone() {
        let (x, y) = separable();
        let view = TrainView::new(&x, &y, 2).unwrap();
        let net = NetworkState::init(NetworkSpec::new(vec![2, 6, 2]).unwrap(), 3);
        let batch = make_batch(&view, &[0, 1, 2]);
        let mut h = PredictionHistory::new(y.len(), 3, 2).unwrap();
        let mut s = net.clone();
        let stepped = phase2_step(
            &mut s,
            &mut h,
            &batch,
            &vec![false; y.len()],
            &config(2).optimizer,
            0,
        )
        .unwrap();
        assert!(!stepped);
        assert_eq!(s, net);
        assert_eq!(h.fill_count(1), 1);
    }

    #[test]
    fn epoch_order_is_shared_and_seeded() {
        assert_eq!(epoch_order(3, 4, 50), epoch_order(3, 4, 50));
        assert_ne!(epoch_order(3, 4, 50), epoch_order(3, 5, 50));
        let mut o = epoch_order(9, 0, 50);
        o.sort_unstable();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }
}
