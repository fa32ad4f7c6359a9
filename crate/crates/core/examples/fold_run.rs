//! Trains and evaluates the first fold on a synthetic dataset and prints the
//! model and reference scores.
//!
//! `cargo run --release --example fold_run -- <base_channels> <max_epochs> <patience> [anomaly_sd]`

use std::time::Instant;

use unicorn_core::evalharness::{make_splits, run_fold};
use unicorn_core::synthdata::{generate, SynthConfig};
use unicorn_core::training::TrainConfig;
use unicorn_core::unetnode::ArchConfig;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let num = |i: usize, d: f64| args.get(i).map_or(d, |a| a.parse().expect("number"));
    let synth = SynthConfig {
        anomaly_sd: num(3, SynthConfig::default().anomaly_sd),
        ..SynthConfig::default()
    };
    let data = generate(&synth).expect("synthetic data");
    let folds = make_splits(data.sic.date(0), data.sic.date(data.len() - 1)).expect("folds");
    let arch = ArchConfig {
        base_channels: num(0, 4.0) as usize,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig {
        max_epochs: num(1, 20.0) as usize,
        patience: num(2, 5.0) as usize,
        seed: 7,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let r = run_fold(&data, &folds[0], &arch, &cfg, None).expect("fold");
    for h in &r.history {
        println!("epoch {:3} train {:.5} val {:.5}", h.epoch, h.train_loss, h.val_loss);
    }
    for (name, rep) in [("model", &r.report), ("persistence", &r.persistence), ("climatology", &r.climatology)] {
        let s = rep.overall;
        println!(
            "{name:12} mae {:.5} rmse {:.5} iiee {:8.3} miou {:.4} f1 {:.4}",
            s.mae, s.rmse, s.iiee, s.miou, s.f1
        );
    }
    println!("elapsed {:?}", t0.elapsed());
}
