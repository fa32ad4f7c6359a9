//! Times one forward/backward pass of the full model on random input.
//!
//! `cargo run --release --example step_timing -- <base> <grid> <batch>`

use std::sync::Arc;
use std::time::Instant;

use unicorn_core::diffops::{Tape, Tensor};
use unicorn_core::unetnode::{ArchConfig, Mode, Model, ModelInput};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let (base, grid, batch) = match args[..] {
        [b, g, n] => (b, g, n),
        _ => (4, 64, 4),
    };
    let cfg = ArchConfig {
        base_channels: base,
        ..ArchConfig::default()
    };
    let model = Model::<f32>::new(cfg, 0).expect("valid config");
    let input = ModelInput {
        x: Tensor::full([batch, 12, grid, grid], 0.3),
        ancillary: Tensor::full([batch, 3, grid, grid], 0.2),
    };
    let target = Tensor::full([batch, 4, grid, grid], 1.0);
    let mask = Arc::new(vec![true; grid * grid]);
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let (pass, _) = model.forward(&mut tape, &input, Mode::Train, true).expect("forward");
        let loss = tape.masked_bce(pass.logits, target.clone(), mask.clone()).expect("loss");
        let t1 = Instant::now();
        tape.backward(loss).expect("backward");
        let t2 = Instant::now();
        println!(
            "params {} forward {:?} backward {:?} per sample {:?}",
            model.param_count(),
            t1 - t0,
            t2 - t1,
            (t2 - t0) / batch as u32
        );
    }
}
