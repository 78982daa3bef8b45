//! Sweeps synthetic-data and model settings and prints the memorization
//! trends of Default and Prestopping at 40% pair noise.
//!
//! cargo run --release --example calibrate -- <spread> <separation> <hidden> <lr> [seed]

use std::time::Instant;

use prestopping::data::{apply_noise, split, synth_gaussian, NoiseKind, SplitSpec, SynthSpec};
use prestopping::engine::{run_default, run_prestopping, StopHeuristic, TrainConfig};
use prestopping::instrumentation::{best_test_error, mp_mr_cross_epoch, MetricsCollector};
use prestopping::nn::{NetworkSpec, NetworkState, OptimizerConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let spread: f64 = args.first().map_or(1.0, |s| s.parse().unwrap());
    let separation: f64 = args.get(1).map_or(2.0, |s| s.parse().unwrap());
    let hidden: Vec<usize> = args.get(2).map_or(vec![64, 64], |s| {
        s.split('x').map(|v| v.parse().unwrap()).collect()
    });
    let lr: f64 = args.get(3).map_or(0.1, |s| s.parse().unwrap());
    let seed: u64 = args.get(4).map_or(0, |s| s.parse().unwrap());
    let noise: NoiseKind = args
        .get(5)
        .map_or("pair".to_string(), |s| s.clone())
        .parse()
        .unwrap();
    let tau: f64 = args.get(6).map_or(0.4, |s| s.parse().unwrap());

    let data = synth_gaussian(&SynthSpec {
        classes: 4,
        per_class: 1375,
        dim: 16,
        spread,
        separation,
        seed,
    })
    .unwrap();
    let parts = split(
        &data,
        &SplitSpec {
            validation_size: 500,
            test_size: 1000,
            seed: seed + 100,
        },
    )
    .unwrap();
    let train = apply_noise(&parts.train, noise, tau, seed + 200).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerConfig {
            base_lr: lr,
            total_epochs: 60,
            ..OptimizerConfig::default()
        },
        q: 10,
        shuffle_seed: seed + 300,
    };
    let spec = NetworkSpec::mlp(16, &hidden, 4).unwrap();
    let n_false = train.clean_mask().iter().filter(|&&c| !c).count() as f64;

    let t = Instant::now();
    let mut col = MetricsCollector::new(&train, &parts.test);
    run_default(
        &train.training_view(),
        &cfg,
        NetworkState::init(spec.clone(), seed + 400),
        Some(&parts.validation),
        &mut col,
    )
    .unwrap();
    let secs = t.elapsed().as_secs_f64();
    for m in col.records.iter().step_by(3) {
        println!(
            "ep {:2} tr {:.3} val {:.3} te {:.3} mp {:.3} mr {:.3} memF {:.3}",
            m.epoch,
            m.train_error,
            m.validation_error.unwrap(),
            m.test_error,
            m.mp,
            m.mr,
            m.memorized_false_count as f64 / n_false
        );
    }
    let cross = mp_mr_cross_epoch(&col.records).unwrap();
    let at = |e: usize| col.records[e - 1].memorized_false_count as f64 / n_false;
    let best_val_epoch = col
        .records
        .iter()
        .min_by(|a, b| {
            a.validation_error
                .unwrap()
                .total_cmp(&b.validation_error.unwrap())
        })
        .unwrap()
        .epoch;
    println!(
        "default: {secs:.1}s best_test {:.4} cross {cross} memF@cross {:.3} memF@end {:.3} hist {:?}",
        best_test_error(&col.records), at(cross), at(60), col.histogram.as_ref().map(|(e, h)| (*e, h.overlap()))
    );

    let t = Instant::now();
    let mut col2 = MetricsCollector::new(&train, &parts.test);
    let out = run_prestopping(
        &train.training_view(),
        StopHeuristic::Validation(&parts.validation),
        &cfg,
        NetworkState::init(spec.clone(), seed + 400),
        &mut col2,
    )
    .unwrap();
    let stop = out.phase1.checkpoint.epoch;
    let eff: Vec<_> = col2
        .records
        .iter()
        .filter(|m| m.phase != prestopping::engine::Phase::Phase1 || m.epoch <= stop)
        .cloned()
        .collect();
    let last = eff.last().unwrap();
    println!(
        "prestop(val): {:.1}s stop {stop} (best val epoch {best_val_epoch}) best_test {:.4} final_te {:.4} safe {} prec {:.3} mr {:.3}",
        t.elapsed().as_secs_f64(), best_test_error(&eff), last.test_error, last.safe_set_size, last.safe_set_precision, last.mr
    );
    let mut col3 = MetricsCollector::new(&train, &parts.test);
    match run_prestopping(
        &train.training_view(),
        StopHeuristic::NoiseRate(tau),
        &cfg,
        NetworkState::init(spec, seed + 400),
        &mut col3,
    ) {
        Ok(out) => {
            let stop = out.phase1.checkpoint.epoch;
            let eff: Vec<_> = col3
                .records
                .iter()
                .filter(|m| m.phase != prestopping::engine::Phase::Phase1 || m.epoch <= stop)
                .cloned()
                .collect();
            println!(
                "prestop(nr): stop {stop} best_test {:.4}",
                best_test_error(&eff)
            );
        }
        Err(e) => println!("prestop(nr): {e}"),
    }
}
