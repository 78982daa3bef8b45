//! Shared fixtures and an independent step-replay auditor.
#![allow(dead_code)]

use prestopping::data::{
    apply_noise, split, synth_gaussian, LabeledView, NoiseKind, NoisyDataset, SplitSpec, SynthSpec,
};
use prestopping::engine::{EpochObserver, MaximalSafeSet, Phase, StepContext, TrainConfig};
use prestopping::memorization::PredictionHistory;
use prestopping::nn::{loss_and_grad, sgd_step, Batch, NetworkSpec, NetworkState, OptimizerConfig};
use prestopping::refurbish::{refurbish_candidates, RefurbConfig, RefurbishedSet};
use prestopping::rng::rng_from_seed;
use prestopping::Matrix;
use rand::Rng;

pub struct Small {
    pub train: NoisyDataset,
    pub validation: LabeledView,
    pub test: LabeledView,
}

/// A few hundred 4-class points with pair noise on the training part.
pub fn small_problem(seed: u64, tau: f64) -> Small {
    let ds = synth_gaussian(&SynthSpec {
        classes: 4,
        per_class: 100,
        dim: 6,
        spread: 1.0,
        separation: 3.0,
        seed,
    })
    .unwrap();
    let s = split(
        &ds,
        &SplitSpec {
            validation_size: 50,
            test_size: 50,
            seed: seed + 1,
        },
    )
    .unwrap();
    let train = apply_noise(&s.train, NoiseKind::Pair, tau, seed + 2).unwrap();
    Small {
        train,
        validation: s.validation,
        test: s.test,
    }
}

pub fn small_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig {
            base_lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            total_epochs: epochs,
            decay_points: vec![0.5, 0.75],
            decay_factor: 5.0,
        },
        q: 5,
        shuffle_seed: seed,
    }
}

pub enum AuditMode {
    /// Restrict to samples memorized under the replayed histories.
    Phase2,
    /// Trusted rows with noisy labels plus rows refurbished from the
    /// replayed histories at each epoch start.
    Plus { config: RefurbConfig },
}

/// Replays every audited step from its own copy of the histories and checks
/// the update bitwise against gathering the selected rows and taking a plain
/// mean-loss step on them.
pub struct StepAudit {
    mode: AuditMode,
    noisy: Vec<usize>,
    optimizer: OptimizerConfig,
    replay: PredictionHistory,
    refurb: Option<RefurbishedSet>,
    epoch: Option<usize>,
    pub steps: usize,
    pub skipped: usize,
    pub steps_with_empty_refurb: usize,
    pub failures: Vec<String>,
}

impl StepAudit {
    pub fn new(
        mode: AuditMode,
        noisy: &[usize],
        optimizer: &OptimizerConfig,
        histories: PredictionHistory,
    ) -> Self {
        Self {
            mode,
            noisy: noisy.to_vec(),
            optimizer: optimizer.clone(),
            replay: histories,
            refurb: None,
            epoch: None,
            steps: 0,
            skipped: 0,
            steps_with_empty_refurb: 0,
            failures: Vec::new(),
        }
    }

    fn phase(&self) -> Phase {
        match self.mode {
            AuditMode::Phase2 => Phase::Phase2,
            AuditMode::Plus { .. } => Phase::Plus,
        }
    }

    /// `(row position, label)` of every row the update should use.
    fn selection(&mut self, ctx: &StepContext<'_>) -> Vec<(usize, usize)> {
        match &self.mode {
            AuditMode::Phase2 => ctx
                .batch
                .sample_indices
                .iter()
                .enumerate()
                .filter(|&(_, &i)| self.replay.is_memorized(i, self.noisy[i]))
                .map(|(r, &i)| (r, self.noisy[i]))
                .collect(),
            AuditMode::Plus { config } => {
                if self.epoch != Some(ctx.epoch) {
                    self.refurb = Some(refurbish_candidates(&self.replay, config));
                    self.epoch = Some(ctx.epoch);
                }
                let refurb = self.refurb.as_ref().unwrap();
                if !refurb.is_disjoint_from(&config.trusted) {
                    self.failures
                        .push(format!("epoch {}: refurbished overlaps trusted", ctx.epoch));
                }
                if refurb.is_empty() {
                    self.steps_with_empty_refurb += 1;
                }
                ctx.batch
                    .sample_indices
                    .iter()
                    .enumerate()
                    .filter_map(|(r, &i)| {
                        if config.trusted.contains(i) {
                            Some((r, self.noisy[i]))
                        } else {
                            refurb.label(i).map(|y| (r, y))
                        }
                    })
                    .collect()
            }
        }
    }
}

impl EpochObserver for StepAudit {
    fn wants_steps(&self) -> bool {
        true
    }

    fn on_step(&mut self, ctx: &StepContext<'_>) {
        if ctx.phase != self.phase() {
            return;
        }
        self.steps += 1;
        let selected = self.selection(ctx);
        let used: Vec<usize> = (0..ctx.batch.len())
            .filter(|&r| ctx.weights[r] != 0.0)
            .collect();
        let want: Vec<usize> = selected.iter().map(|&(r, _)| r).collect();
        if used != want {
            self.failures.push(format!(
                "step {}: used rows {used:?}, expected {want:?}",
                self.steps
            ));
        }
        if selected.is_empty() {
            self.skipped += 1;
            if ctx.stepped || ctx.after != ctx.before {
                self.failures.push(format!(
                    "step {}: empty selection changed parameters",
                    self.steps
                ));
            }
        } else {
            let rows: Vec<usize> = selected.iter().map(|&(r, _)| r).collect();
            let sub = Batch::new(
                rows.iter().map(|&r| ctx.batch.sample_indices[r]).collect(),
                ctx.batch.features.gather_rows(&rows),
                selected.iter().map(|&(_, y)| y).collect(),
            )
            .unwrap();
            let lg = loss_and_grad(&sub, ctx.before).unwrap();
            let mut expected = ctx.before.clone();
            sgd_step(&mut expected, &lg.grad, &self.optimizer, ctx.epoch).unwrap();
            if expected.params != ctx.after.params || expected.momentum != ctx.after.momentum {
                self.failures.push(format!(
                    "step {}: update differs from the gathered oracle",
                    self.steps
                ));
            }
        }
        let predictions = ctx.before.predict(&ctx.batch.features).unwrap();
        for (&i, &p) in ctx.batch.sample_indices.iter().zip(&predictions) {
            self.replay.record(i, p).unwrap();
        }
    }
}

/// Straight-loop forward pass: returns per-row probabilities and every
/// hidden pre-activation.
pub fn naive_forward(state: &NetworkState, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a = x.to_vec();
    let mut pre = Vec::new();
    let n = state.params.layers.len();
    for (l, layer) in state.params.layers.iter().enumerate() {
        let mut z = vec![0.0; layer.fan_out];
        for j in 0..layer.fan_out {
            let mut s = layer.biases[j];
            for i in 0..layer.fan_in {
                s += a[i] * layer.weights[i * layer.fan_out + j];
            }
            z[j] = s;
        }
        if l + 1 < n {
            pre.extend_from_slice(&z);
            a = z.iter().map(|&v| v.max(0.0)).collect();
        } else {
            a = z;
        }
    }
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (e.iter().map(|v| v / s).collect(), pre)
}

pub fn naive_mean_loss(state: &NetworkState, x: &Matrix, y: &[usize]) -> f64 {
    (0..x.rows())
        .map(|r| -naive_forward(state, x.row(r)).0[y[r]].ln())
        .sum::<f64>()
        / x.rows() as f64
}

pub struct Case {
    pub state: NetworkState,
    pub x: Matrix,
    pub y: Vec<usize>,
}

/// Random small network and batch whose hidden pre-activations all stay
/// clear of the ReLU kink, so central differences are well defined.
pub fn random_case(seed: u64) -> Case {
    let mut rng = rng_from_seed(seed);
    loop {
        let input = rng.random_range(2..6);
        let hidden: Vec<usize> = (0..rng.random_range(1..3))
            .map(|_| rng.random_range(2..7))
            .collect();
        let classes = rng.random_range(2..6);
        let spec = NetworkSpec::mlp(input, &hidden, classes).unwrap();
        let mut state = NetworkState::init(spec, rng.random());
        for p in state.params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let rows = rng.random_range(1..7);
        let x = Matrix::new(
            rows,
            input,
            (0..rows * input)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )
        .unwrap();
        let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let clear = (0..rows).all(|r| {
            naive_forward(&state, x.row(r))
                .1
                .iter()
                .all(|z| z.abs() > 1e-3)
        });
        if clear {
            return Case { state, x, y };
        }
    }
}

/// Largest relative difference between analytic and central-difference
/// gradients (step 1e-5) over `cases` random networks. The denominator is
/// floored at 1e-6 so near-zero entries are judged on absolute error.
pub fn max_gradient_error(cases: u64, seed: u64) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for case_id in 0..cases {
        let Case { state, x, y } = random_case(seed + case_id);
        let batch = Batch::new((0..x.rows()).collect(), x.clone(), y.clone()).unwrap();
        let lg = loss_and_grad(&batch, &state).unwrap();
        for k in 0..state.params.len() {
            let mut plus = state.clone();
            plus.params.set_flat(k, state.params.get_flat(k) + h);
            let mut minus = state.clone();
            minus.params.set_flat(k, state.params.get_flat(k) - h);
            let numeric =
                (naive_mean_loss(&plus, &x, &y) - naive_mean_loss(&minus, &x, &y)) / (2.0 * h);
            let analytic = lg.grad.get_flat(k);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn all_true(n: usize) -> MaximalSafeSet {
    MaximalSafeSet::from_mask(vec![true; n])
}
