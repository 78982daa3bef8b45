mod common;

use common::{small_config, small_problem, AuditMode, StepAudit};
use prestopping::engine::{
    compute_safe_set, epoch_order, make_batch, phase1_train, phase2_step, phase2_train,
    run_default, EpochContext, EpochObserver, MaximalSafeSet, Phase, StopHeuristic,
};
use prestopping::memorization::PredictionHistory;
use prestopping::nn::{loss_and_grad, weighted_loss_and_grad, Batch, NetworkSpec, NetworkState};
use prestopping::refurbish::{
    plus_targets, prestopping_plus_step, run_prestopping_plus, RefurbConfig, RefurbishedSet,
};
use prestopping::rng::rng_from_seed;
use rand::Rng;

#[derive(Default)]
struct Trace {
    rows: Vec<(usize, Phase, f64, Option<f64>, f64)>,
    networks: Vec<NetworkState>,
}

impl EpochObserver for Trace {
    fn on_epoch(&mut self, ctx: &EpochContext<'_>) {
        self.rows.push((
            ctx.epoch,
            ctx.phase,
            ctx.train_error,
            ctx.validation_error,
            ctx.lr,
        ));
        self.networks.push(ctx.network.clone());
    }
}

fn init(train_dim: usize, seed: u64) -> NetworkState {
    NetworkState::init(NetworkSpec::mlp(train_dim, &[16], 4).unwrap(), seed)
}

#[test]
fn phase2_steps_match_the_gathered_oracle() {
    let p = small_problem(1, 0.3);
    let view = p.train.training_view();
    let cfg = small_config(14, 5);
    let phase1 = phase1_train(
        &view,
        StopHeuristic::Validation(&p.validation),
        &cfg,
        init(6, 2),
        &mut (),
    )
    .unwrap();
    let cp = phase1.checkpoint;
    assert!(
        cfg.total_epochs() - cp.epoch >= 3,
        "stopped at {}",
        cp.epoch
    );
    let mut audit = StepAudit::new(
        AuditMode::Phase2,
        p.train.noisy_labels(),
        &cfg.optimizer,
        cp.histories.clone(),
    );
    phase2_train(&cp, &view, &cfg, None, &mut audit).unwrap();
    assert!(audit.failures.is_empty(), "{:?}", audit.failures);
    assert!(audit.steps > 0);
}

#[test]
fn phase2_replay_is_deterministic_and_on_the_global_clock() {
    let p = small_problem(2, 0.3);
    let view = p.train.training_view();
    let cfg = small_config(12, 9);
    let phase1 = phase1_train(
        &view,
        StopHeuristic::Validation(&p.validation),
        &cfg,
        init(6, 4),
        &mut (),
    )
    .unwrap();
    let mut a = Trace::default();
    let mut b = Trace::default();
    let ra = phase2_train(&phase1.checkpoint, &view, &cfg, None, &mut a).unwrap();
    let rb = phase2_train(&phase1.checkpoint, &view, &cfg, None, &mut b).unwrap();
    assert_eq!(ra.network, rb.network);
    assert_eq!(ra.safe_set, rb.safe_set);
    let epochs: Vec<usize> = a.rows.iter().map(|r| r.0).collect();
    assert_eq!(
        epochs,
        ((phase1.checkpoint.epoch + 1)..=12).collect::<Vec<_>>()
    );
    for r in &a.rows {
        assert_eq!(r.4, cfg.optimizer.lr_at(r.0 - 1));
    }
}

#[test]
fn noise_rate_stop_is_the_first_epoch_under_tau() {
    let p = small_problem(3, 0.3);
    let view = p.train.training_view();
    let cfg = small_config(30, 1);
    let mut trace = Trace::default();
    let out = phase1_train(
        &view,
        StopHeuristic::NoiseRate(0.3),
        &cfg,
        init(6, 7),
        &mut trace,
    )
    .unwrap();
    let first = trace.rows.iter().find(|r| r.2 <= 0.3).unwrap().0;
    assert_eq!(out.checkpoint.epoch, first);
    assert_eq!(trace.rows.len(), first);
}

#[test]
fn validation_stop_is_the_first_minimum() {
    let p = small_problem(4, 0.3);
    let view = p.train.training_view();
    let cfg = small_config(15, 2);
    let mut trace = Trace::default();
    let out = phase1_train(
        &view,
        StopHeuristic::Validation(&p.validation),
        &cfg,
        init(6, 8),
        &mut trace,
    )
    .unwrap();
    let vals: Vec<f64> = trace.rows.iter().map(|r| r.3.unwrap()).collect();
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let first = vals.iter().position(|&v| v == min).unwrap() + 1;
    assert_eq!(out.checkpoint.epoch, first);
    assert_eq!(out.checkpoint.network, trace.networks[first - 1]);
    assert_eq!(trace.rows.len(), 15);

    // The unrestricted part of the trajectory is the default run.
    let (net, _) = run_default(&view, &cfg, init(6, 8), None, &mut ()).unwrap();
    assert_eq!(&net, trace.networks.last().unwrap());
}

#[test]
fn safe_set_matches_a_loop_over_histories() {
    let mut rng = rng_from_seed(12);
    for _ in 0..50 {
        let n = 60;
        let q = rng.random_range(1..8);
        let mut h = PredictionHistory::new(n, q, 3).unwrap();
        for _ in 0..rng.random_range(0..400) {
            h.record(rng.random_range(0..n), rng.random_range(0..3))
                .unwrap();
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let x = prestopping::Matrix::zeros(n, 1);
        let view = prestopping::data::TrainView::new(&x, &labels, 3).unwrap();
        let mut want = Vec::new();
        for i in 0..n {
            let e = h.entries(i);
            if e.is_empty() {
                continue;
            }
            let c: Vec<usize> = (0..3)
                .map(|y| e.iter().filter(|&&p| p == y).count())
                .collect();
            let top = (0..3).fold(0, |b, y| if c[y] > c[b] { y } else { b });
            if top == labels[i] {
                want.push(i);
            }
        }
        assert_eq!(compute_safe_set(&h, &view).indices, want);
    }
}

#[test]
fn prestopping_plus_steps_match_the_two_term_oracle() {
    let p = small_problem(5, 0.3);
    let view = p.train.training_view();
    let cfg = small_config(12, 3);
    let phase1 = phase1_train(
        &view,
        StopHeuristic::Validation(&p.validation),
        &cfg,
        init(6, 1),
        &mut (),
    )
    .unwrap();
    let phase2 = phase2_train(&phase1.checkpoint, &view, &cfg, None, &mut ()).unwrap();
    for epsilon in [0.0, 0.05, 0.3] {
        let rc = RefurbConfig::new(epsilon, phase2.safe_set.clone()).unwrap();
        let empty = PredictionHistory::new(view.len(), cfg.q, 4).unwrap();
        let mut audit = StepAudit::new(
            AuditMode::Plus { config: rc.clone() },
            p.train.noisy_labels(),
            &cfg.optimizer,
            empty,
        );
        let out = run_prestopping_plus(&view, &rc, &cfg, init(6, 1), None, &mut audit).unwrap();
        assert!(
            audit.failures.is_empty(),
            "epsilon {epsilon}: {:?}",
            audit.failures
        );
        assert!(out.refurbished.is_disjoint_from(&rc.trusted));
        assert!(audit.steps_with_empty_refurb > 0);
    }
}

#[test]
fn empty_refurbishment_reduces_to_phase2_steps() {
    let p = small_problem(6, 0.3);
    let view = p.train.training_view();
    let cfg = small_config(10, 4);
    let mut rng = rng_from_seed(6);
    let trusted =
        MaximalSafeSet::from_mask((0..view.len()).map(|_| rng.random_bool(0.6)).collect());
    let empty = RefurbishedSet::empty(view.len());
    let mut a = init(6, 11);
    let mut b = a.clone();
    let mut ha = PredictionHistory::new(view.len(), cfg.q, 4).unwrap();
    let mut hb = ha.clone();
    for epoch in 0..cfg.total_epochs() {
        for chunk in
            epoch_order(cfg.shuffle_seed, epoch, view.len()).chunks(cfg.optimizer.batch_size)
        {
            let batch = make_batch(&view, chunk);
            prestopping_plus_step(
                &mut a,
                &mut ha,
                &batch,
                &empty,
                &trusted,
                &cfg.optimizer,
                epoch,
            )
            .unwrap();
            phase2_step(
                &mut b,
                &mut hb,
                &batch,
                trusted.mask(),
                &cfg.optimizer,
                epoch,
            )
            .unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn mixed_batch_loss_is_the_two_term_mean() {
    let p = small_problem(7, 0.3);
    let view = p.train.training_view();
    let state = init(6, 3);
    let batch = make_batch(&view, &[0, 1, 2, 3, 4, 5, 6, 7]);
    // Rows 0, 3, 5 trusted; rows 1 and 6 refurbished to class (noisy + 2) mod 4.
    let trusted = MaximalSafeSet::from_indices(
        view.len(),
        &[
            batch.sample_indices[0],
            batch.sample_indices[3],
            batch.sample_indices[5],
        ],
    )
    .unwrap();
    let mut entries = vec![None; view.len()];
    for r in [1, 6] {
        entries[batch.sample_indices[r]] = Some(((batch.labels[r] + 2) % 4, 0.0));
    }
    let refurb = RefurbishedSet::from_entries(entries);
    let (labels, weights) = plus_targets(&batch, &refurb, &trusted);
    let masked = weighted_loss_and_grad(&batch.features, &labels, &weights, &state).unwrap();

    let rows = [0, 1, 3, 5, 6];
    let two_term_labels: Vec<usize> = rows
        .iter()
        .map(|&r| {
            if r == 1 || r == 6 {
                (batch.labels[r] + 2) % 4
            } else {
                batch.labels[r]
            }
        })
        .collect();
    let sub = Batch::new(
        rows.iter().map(|&r| batch.sample_indices[r]).collect(),
        batch.features.gather_rows(&rows),
        two_term_labels.clone(),
    )
    .unwrap();
    let gathered = loss_and_grad(&sub, &state).unwrap();
    assert_eq!(masked.loss, gathered.loss);
    assert_eq!(masked.grad, gathered.grad);

    let probs = state.forward(&batch.features).unwrap();
    let ce = |r: usize, y: usize| -probs.get(r, y).ln();
    let trusted_term: f64 = [0, 3, 5].iter().map(|&r| ce(r, batch.labels[r])).sum();
    let refurb_term: f64 = [1, 6]
        .iter()
        .map(|&r| ce(r, (batch.labels[r] + 2) % 4))
        .sum();
    assert!((masked.loss - (trusted_term + refurb_term) / 5.0).abs() < 1e-12);
    assert!(weights
        .iter()
        .enumerate()
        .all(|(r, &w)| (w == 0.0) != rows.contains(&r)));
}
