use std::collections::HashSet;

use prestopping::memorization::{mp_mr, MemorizationState, PredictionHistory};
use prestopping::rng::rng_from_seed;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Last `q` entries of the full log, counted by brute force.
fn oracle(log: &[usize], q: usize, k: usize, noisy: usize) -> (Vec<f64>, bool) {
    let window = &log[log.len().saturating_sub(q)..];
    if window.is_empty() {
        return (vec![], false);
    }
    let probs: Vec<f64> = (0..k)
        .map(|y| window.iter().filter(|&&p| p == y).count() as f64 / window.len() as f64)
        .collect();
    let mut best = 0;
    for y in 1..k {
        if probs[y] > probs[best] {
            best = y;
        }
    }
    (probs, best == noisy)
}

#[test]
fn probabilities_and_membership_match_counting() {
    let mut rng = rng_from_seed(31);
    for _ in 0..1000 {
        let k = rng.random_range(2..7);
        let q = rng.random_range(1..16);
        let len = rng.random_range(0..40);
        let log: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let noisy = rng.random_range(0..k);
        let mut h = PredictionHistory::new(1, q, k).unwrap();
        for &p in &log {
            h.record(0, p).unwrap();
        }
        let (probs, memorized) = oracle(&log, q, k, noisy);
        assert_eq!(h.is_memorized(0, noisy), memorized, "log {log:?} q {q}");
        assert_eq!(h.entries(0), log[log.len().saturating_sub(q)..].to_vec());
        if probs.is_empty() {
            assert!(h.label_probability(0, noisy).is_err());
            assert!(h.distribution(0).is_none());
        } else {
            for (y, &p) in probs.iter().enumerate() {
                assert_eq!(h.label_probability(0, y).unwrap(), p);
            }
        }
    }
}

#[test]
fn mp_mr_match_set_arithmetic() {
    let mut rng = rng_from_seed(77);
    for _ in 0..100 {
        let n = 100;
        let k = rng.random_range(2..6);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let flip = rng.random_range(0.0..0.6);
        let noisy: Vec<usize> = truth
            .iter()
            .map(|&t| {
                if rng.random_bool(flip) {
                    (t + 1) % k
                } else {
                    t
                }
            })
            .collect();
        let density = rng.random_range(0.0..1.0);
        let memorized: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();

        let m: HashSet<usize> = (0..n).filter(|&i| memorized[i]).collect();
        let t: HashSet<usize> = (0..n).filter(|&i| noisy[i] == truth[i]).collect();
        let both = m.intersection(&t).count();
        let mp = if m.is_empty() {
            1.0
        } else {
            both as f64 / m.len() as f64
        };
        let mr = if t.is_empty() {
            1.0
        } else {
            both as f64 / t.len() as f64
        };

        let got = mp_mr(&MemorizationState { memorized }, &noisy, &truth);
        assert_eq!(got.precision, mp);
        assert_eq!(got.recall, mr);
        assert_eq!(got.memorized_true, both);
        assert_eq!(got.memorized_false, m.len() - both);
        assert_eq!(got.true_labeled, t.len());
    }
}

#[test]
fn q_one_tracks_the_latest_prediction() {
    let mut h = PredictionHistory::new(1, 1, 3).unwrap();
    for &p in &[0, 2, 1, 1, 0] {
        h.record(0, p).unwrap();
        assert!(h.is_memorized(0, p));
        assert!(!h.is_memorized(0, (p + 1) % 3));
    }
}

#[test]
fn history_file_round_trip() {
    let mut rng = rng_from_seed(3);
    let mut h = PredictionHistory::new(20, 7, 5).unwrap();
    for _ in 0..100 {
        h.record(rng.random_range(0..20), rng.random_range(0..5))
            .unwrap();
    }
    let mut buf = Vec::new();
    h.write_to(&mut buf).unwrap();
    let back = PredictionHistory::read_from(buf.as_slice(), 5).unwrap();
    for i in 0..20 {
        assert_eq!(back.entries(i), h.entries(i));
    }
    assert!(PredictionHistory::read_from(&buf[..buf.len() - 1], 5).is_err());
}

proptest! {
    #[test]
    fn membership_ignores_order_within_the_window(
        window in prop::collection::vec(0usize..4, 1..12),
        noisy in 0usize..4,
        seed in 0u64..1000,
    ) {
        let q = window.len();
        let mut shuffled = window.clone();
        shuffled.shuffle(&mut rng_from_seed(seed));
        let mut a = PredictionHistory::new(1, q, 4).unwrap();
        let mut b = PredictionHistory::new(1, q, 4).unwrap();
        for (&x, &y) in window.iter().zip(&shuffled) {
            a.record(0, x).unwrap();
            b.record(0, y).unwrap();
        }
        prop_assert_eq!(a.is_memorized(0, noisy), b.is_memorized(0, noisy));
        prop_assert_eq!(a.counts(0), b.counts(0));
    }

    #[test]
    fn distribution_sums_to_one(log in prop::collection::vec(0usize..6, 1..30), q in 1usize..20) {
        let mut h = PredictionHistory::new(1, q, 6).unwrap();
        for &p in &log {
            h.record(0, p).unwrap();
        }
        let d = h.distribution(0).unwrap();
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(h.fill_count(0), log.len().min(q));
    }
}
