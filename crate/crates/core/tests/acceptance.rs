//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criterion numbers given as arguments select a
//! subset: `cargo test -p unicorn-core --test acceptance -- 2 4`.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unicorn_core::dcmp::Window;
use unicorn_core::diffops::{grad_check, grad_check_at, DiffError, Padding, Tape, Tensor, Var};
use unicorn_core::evalharness::{
    make_splits, run_ablations, run_fold, write_fold_outputs, zero_dynamics, DateRange, FoldSpec,
};
use unicorn_core::gridio::{Dataset, RegionMask};
use unicorn_core::metrics::{sic_metrics, sie_metrics, ForecastPair, EXTENT_THRESHOLD};
use unicorn_core::synthdata::{generate, SynthConfig};
use unicorn_core::training::{train_step, AdamState, TrainConfig, WindowSet};
use unicorn_core::unetnode::{convnode_evolve, ArchConfig, Mode, Model, ModelInput, Variant};

type Check = fn() -> Result<String, String>;

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let checks: [(usize, &str, Check); 9] = [
        (1, "gradient correctness", c1_gradients),
        (2, "decomposition identity", c2_decomposition),
        (3, "convnode correctness", c3_convnode),
        (4, "metric oracles", c4_metrics),
        (5, "overfit sanity", c5_overfit),
        (6, "end-to-end learning signal", c6_end_to_end),
        (7, "ablation harness", c7_ablation),
        (8, "protocol fidelity", c8_protocol),
        (9, "reproducibility", c9_reproducibility),
    ];
    let mut failed = 0;
    for (n, name, check) in checks {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("{what} took {:.0}s, limit {}s", t.as_secs_f64(), limit.as_secs()))
}

fn random(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn synth(n_weeks: usize, size: usize, seed: u64) -> Dataset {
    generate(&SynthConfig {
        height: size,
        width: size,
        n_weeks,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn span_folds(data: &Dataset) -> Vec<FoldSpec> {
    make_splits(data.sic.date(0), data.sic.date(data.len() - 1)).unwrap()
}

// ---------------------------------------------------------------- 1

const GRAD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-3;

/// `sum(y ⊙ R)` for a fixed random `R`, turning any op output into a scalar
/// with a generic gradient.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(t.value(y).shape(), -1.0, 1.0, &mut rng);
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

fn op_errors(seed: u64) -> Result<Vec<(&'static str, f64)>, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=4);
    let c2 = rng.gen_range(1..=4);
    let h = 2 * rng.gen_range(1..=8);
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let ps = rng.gen::<u64>();
    let mut out = Vec::new();
    let x = |rng: &mut ChaCha8Rng, shape: [usize; 4]| random(shape, -1.0, 1.0, rng);

    let inputs = [x(&mut rng, [n, c, h, h]), x(&mut rng, [c2, c, k, k]), x(&mut rng, [c2, 1, 1, 1])];
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], v[2], 1, Padding::Same)?;
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("conv2d", e));

    let inputs = [x(&mut rng, [n, c, h, h]), x(&mut rng, [c2, c, 2, 2]), x(&mut rng, [c2, 1, 1, 1])];
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], v[2], 2, Padding::Valid)?;
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("conv2d_strided", e));

    let inputs = [x(&mut rng, [n, c, h / 2, h / 2]), x(&mut rng, [c, c2, 2, 2]), x(&mut rng, [c2, 1, 1, 1])];
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv_transpose2d(v[0], v[1], v[2])?;
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("conv_transpose2d", e));

    let inputs = [x(&mut rng, [n, c, h, h])];
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.maxpool2(v[0])?;
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("maxpool2", e));

    let inputs = [x(&mut rng, [n, c, h, h]), random([c, 1, 1, 1], 0.5, 1.5, &mut rng), x(&mut rng, [c, 1, 1, 1])];
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("batchnorm_train", e));

    let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("batchnorm_eval", e));

    let inputs = [x(&mut rng, [n, c, h, h])];
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.relu(v[0]);
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("relu", e));
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.sigmoid(v[0]);
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("sigmoid", e));
    let e = grad_check(|t: &mut Tape<f64>, v: &[Var]| Ok(t.sum(v[0])), &inputs, GRAD_STEP)?;
    out.push(("sum", e));

    let inputs = [x(&mut rng, [n, c, h, h]), x(&mut rng, [n, c2, h, h])];
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.concat(&[v[0], v[1]])?;
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("concat", e));

    let inputs = [x(&mut rng, [n, c, h, h]), x(&mut rng, [n, c, h, h])];
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.add(v[0], v[1])?;
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("add", e));
    let scale = rng.gen_range(-2.0..2.0);
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.add_scaled(v[0], v[1], scale)?;
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("add_scaled", e));
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, ps)
        },
        &inputs,
        GRAD_STEP,
    )?;
    out.push(("mul", e));

    let logits = random([n, c, h, h], -4.0, 4.0, &mut rng);
    let target = random([n, c, h, h], 0.0, 1.0, &mut rng);
    let mut mask: Vec<bool> = (0..h * h).map(|_| rng.gen_bool(0.7)).collect();
    mask[0] = true;
    let mask = Arc::new(mask);
    let e = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| t.masked_bce(v[0], target.clone(), mask.clone()),
        &[logits],
        GRAD_STEP,
    )?;
    out.push(("masked_bce", e));
    Ok(out)
}

/// Full forward pass plus loss, checked on two random coordinates of every
/// parameter tensor. Returns the worst relative error.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error of the full model over 100 sampled parameters, and
/// how many of them needed a step other than the default.
///
/// ReLU and max-pool make the loss piecewise smooth, so a stencil can straddle
/// a switch; a larger step then crosses more of them while a smaller one
/// drowns tiny gradients in roundoff. A coordinate that misses at the default
/// step is retried once larger and once smaller and keeps its best error.
fn model_error(seed: u64) -> Result<(f64, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 16;
    let cfg = ArchConfig {
        base_channels: rng.gen_range(2..=4),
        latent_channels: Some(rng.gen_range(2..=4)),
        ..ArchConfig::default()
    };
    let n = 2;
    let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Eval };
    let mut model = Model::<f64>::new(cfg, seed).map_err(|e| e.to_string())?;
    let inp = ModelInput {
        x: random([n, 12, h, h], 0.0, 1.0, &mut rng),
        ancillary: random([n, 3, h, h], 0.0, 1.0, &mut rng),
    };
    let target = random([n, 4, h, h], 0.0, 1.0, &mut rng);
    let mask: Arc<Vec<bool>> = Arc::new((0..h * h).map(|_| rng.gen_bool(0.8)).collect());
    if mode == Mode::Eval {
        // Running statistics as after training on this batch.
        for _ in 0..100 {
            let mut tape = Tape::new();
            let (pass, _) = model.forward(&mut tape, &inp, Mode::Train, false).map_err(|e| e.to_string())?;
            model.apply_bn_updates(&pass.bn_updates);
        }
    }
    let model = model;
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let pass = model
            .forward_with(tape, vars, &inp, mode)
            .map_err(|e| DiffError::InvalidInput(e.to_string()))?;
        tape.masked_bce(pass.logits, target.clone(), mask.clone())
    };
    let value = |probe: &[Tensor<f64>]| -> Result<f64, String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars).map_err(|e| e.to_string())?;
        Ok(tape.value(out).data()[0])
    };
    let inputs = model.params().tensors().to_vec();
    // Under batch statistics a conv bias feeding a batch norm cancels
    // exactly; its gradient must vanish rather than match a relative bound.
    let cancelled = |i: usize| {
        let name = &model.params().names()[i];
        mode == Mode::Train && name.contains(".conv") && name.ends_with(".bias")
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    for (i, &v) in vars.iter().enumerate().filter(|(i, _)| cancelled(*i)) {
        let g = grads.get_or_zeros(v, inputs[i].shape());
        ensure(g.data().iter().all(|d| d.abs() < 1e-12), || {
            format!("seed {seed}: cancelled bias {} has a non-zero gradient", model.params().names()[i])
        })?;
    }
    let pool: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(i, _)| !cancelled(*i))
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    let coords: Vec<(usize, usize)> = (0..100).map(|_| pool[rng.gen_range(0..pool.len())]).collect();

    let worst = grad_check_at(&f, &inputs, &coords, GRAD_STEP).map_err(|e| e.to_string())?;
    if worst < GRAD_TOL {
        return Ok((worst, 0));
    }
    let (mut worst, mut moved) = (0.0f64, 0);
    let mut probe = inputs.clone();
    for &(i, k) in &coords {
        let analytic = grads.get_or_zeros(vars[i], inputs[i].shape()).data()[k];
        let orig = inputs[i].data()[k];
        let mut best = f64::INFINITY;
        for (n, step) in [GRAD_STEP, 1e-5, 1e-7].into_iter().enumerate() {
            probe[i].data_mut()[k] = orig + step;
            let up = value(&probe)?;
            probe[i].data_mut()[k] = orig - step;
            let down = value(&probe)?;
            probe[i].data_mut()[k] = orig;
            best = best.min(rel_err(analytic, (up - down) / (2.0 * step)));
            if best < GRAD_TOL {
                moved += usize::from(n > 0);
                break;
            }
        }
        worst = worst.max(best);
    }
    Ok((worst, moved))
}

fn c1_gradients() -> Result<String, String> {
    let t0 = Instant::now();
    let (mut worst_op, mut worst_op_name) = (0.0f64, "");
    let (mut worst_model, mut moved) = (0.0f64, 0);
    for seed in 0..20u64 {
        for (name, e) in op_errors(100 + seed).map_err(|e| format!("seed {seed}: {e}"))? {
            ensure(e < GRAD_TOL, || format!("{name} seed {seed}: relative error {e:.3e}"))?;
            if e > worst_op {
                worst_op = e;
                worst_op_name = name;
            }
        }
        let (e, k) = model_error(200 + seed)?;
        moved += k;
        ensure(e < GRAD_TOL, || format!("full model seed {seed}: relative error {e:.3e}"))?;
        worst_model = worst_model.max(e);
    }
    within(t0, Duration::from_secs(300), "gradient checks")?;
    Ok(format!(
        "14 ops and the full model over 20 seeds; worst op error {worst_op:.2e} ({worst_op_name}), worst model error {worst_model:.2e} ({moved} coordinates on another step)"
    ))
}

// ---------------------------------------------------------------- 2

/// Spacing between `x` and the next larger f32 magnitude.
fn ulp(x: f32) -> f32 {
    let x = x.abs();
    if x == 0.0 {
        f32::from_bits(1)
    } else {
        f32::from_bits(x.to_bits() + 1) - x
    }
}

fn moving_average_reference(frames: &[f32], len: usize, width: usize) -> Vec<f64> {
    let plane = frames.len() / len;
    let half = (width / 2) as isize;
    let mut out = vec![0.0; frames.len()];
    for l in 0..len as isize {
        for p in 0..plane {
            let mut s = 0.0f64;
            for d in -half..=half {
                let src = (l + d).clamp(0, len as isize - 1) as usize;
                s += frames[src * plane + p] as f64;
            }
            out[l as usize * plane + p] = s / width as f64;
        }
    }
    out
}

fn c2_decomposition() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_ulps = 0.0f32;
    let mut worst_trend = 0.0f64;
    for w in 0..1000 {
        let width = [1, 3, 5, 7][rng.gen_range(0..4)];
        let len = rng.gen_range(width + 1..=16);
        let plane = rng.gen_range(1..=32);
        let scale = 10f32.powf(rng.gen_range(-3.0..3.0));
        let offset = rng.gen_range(-1.0..1.0) * scale * 10.0;
        let frames: Vec<f32> = (0..len * plane).map(|_| offset + scale * rng.gen_range(-1.0f32..1.0)).collect();
        let d = Window::new(frames.clone(), len)
            .and_then(|win| win.decompose(width))
            .map_err(|e| format!("window {w}: {e}"))?;
        let reference = moving_average_reference(&frames, len, width);
        for (k, &x) in frames.iter().enumerate() {
            let (t, r) = (d.trend.as_slice()[k], d.residual.as_slice()[k]);
            let mag = x.abs().max(t.abs()).max(r.abs());
            let ulps = ((t + r) - x).abs() / ulp(mag);
            ensure(ulps <= 4.0, || format!("window {w} element {k}: {x} reconstructed as {} ({ulps} ulp)", t + r))?;
            worst_ulps = worst_ulps.max(ulps);
            let rel = (t as f64 - reference[k]).abs() / (mag as f64).max(f64::MIN_POSITIVE);
            ensure(rel < 1e-5, || format!("window {w} element {k}: trend {t} vs reference {}", reference[k]))?;
            worst_trend = worst_trend.max(rel);
        }
    }
    for i in 0..200 {
        let c = if i == 0 { 0.0 } else { rng.gen_range(-1.0f32..1.0) * 10f32.powi(rng.gen_range(-6..6)) };
        let width = [1, 3, 5, 7, 9, 11][i % 6];
        let len = width + 1 + i % 5;
        let plane = 1 + i % 9;
        let d = Window::new(vec![c; len * plane], len)
            .and_then(|win| win.decompose(width))
            .map_err(|e| e.to_string())?;
        ensure(d.residual.as_slice().iter().all(|&r| r == 0.0), || format!("constant {c}: non-zero residual"))?;
        ensure(d.trend.as_slice().iter().all(|&t| t == c), || format!("constant {c}: trend differs"))?;
    }
    Ok(format!(
        "1000 random windows, worst reconstruction {worst_ulps} ulp, trend within {worst_trend:.1e} of the f64 reference; 200 constant windows with residual exactly 0"
    ))
}

// ---------------------------------------------------------------- 3

fn evolve_final(lambda: f64, z0: &Tensor<f64>, steps: usize, tau: usize) -> Tensor<f64> {
    let mut w = Tensor::zeros([1, 1, 3, 3]);
    w.set(0, 0, 1, 1, lambda);
    let mut tape = Tape::new();
    let z = tape.constant(z0.clone());
    let wv = tape.constant(w);
    let b = tape.constant(Tensor::zeros([1, 1, 1, 1]));
    let traj = convnode_evolve(&mut tape, z, tau, wv, b, steps).unwrap();
    tape.value(*traj.last().unwrap()).clone()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c3_convnode() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // (a) zero dynamics
    for _ in 0..10 {
        let c = rng.gen_range(1..=4);
        let z0 = random([2, c, 4, 4], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let z = tape.constant(z0.clone());
        let w = tape.constant(Tensor::zeros([c, c, 3, 3]));
        let b = tape.constant(Tensor::zeros([c, 1, 1, 1]));
        let traj = convnode_evolve(&mut tape, z, 4, w, b, rng.gen_range(1..=8)).map_err(|e| e.to_string())?;
        for &s in &traj {
            ensure(tape.value(s).data() == z0.data(), || "zero dynamics changed the state".into())?;
        }
    }
    // (b) first-order convergence of the scalar linear case
    let tau = 4;
    let kappa = (tau - 1) as f64;
    let mut orders = Vec::new();
    for lambda in [-0.7, 0.4] {
        let z0 = random([1, 1, 4, 4], 0.5, 1.5, &mut rng);
        let reference = evolve_final(lambda, &z0, 1024, tau);
        let closed = z0.map(|v| v * (lambda * kappa).exp());
        let ref_err = max_diff(&reference, &closed);
        let errs: Vec<f64> = [4, 8, 16, 32]
            .iter()
            .map(|&s| max_diff(&evolve_final(lambda, &z0, s, tau), &reference))
            .collect();
        for pair in errs.windows(2) {
            let p = (pair[0] / pair[1]).log2();
            ensure((p - 1.0).abs() <= 0.2, || format!("lambda {lambda}: observed order {p:.3}"))?;
            orders.push(p);
        }
        let closed_errs: Vec<f64> = [4, 8, 16, 32]
            .iter()
            .map(|&s| max_diff(&evolve_final(lambda, &z0, s, tau), &closed))
            .collect();
        ensure(closed_errs.windows(2).all(|p| p[1] < p[0]), || format!("lambda {lambda}: error to closed form not decreasing"))?;
        ensure(ref_err < closed_errs[3], || format!("lambda {lambda}: 1024-step reference error {ref_err:.2e} too large"))?;
    }
    let (lo, hi) = orders.iter().fold((f64::MAX, f64::MIN), |(a, b), &p| (a.min(p), b.max(p)));
    Ok(format!("zero dynamics constant over 10 trials; observed orders in [{lo:.3}, {hi:.3}]"))
}

// ---------------------------------------------------------------- 4

/// Independent scalar/set reference for all five scores.
fn metric_oracle(pairs: &[ForecastPair], ocean: &[bool]) -> [f64; 5] {
    let tau = pairs[0].lead_times;
    let plane = ocean.len();
    let cells: Vec<usize> = (0..plane).filter(|&k| ocean[k]).collect();
    let (mut abs, mut sq, mut count) = (0.0f64, 0.0f64, 0usize);
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let mut iiee = 0.0;
    let mut miou = 0.0;
    for p in pairs {
        let mut iou_t = 0.0;
        for l in 0..tau {
            let truth: HashSet<usize> = cells
                .iter()
                .copied()
                .filter(|&k| p.truth[l * plane + k] >= EXTENT_THRESHOLD)
                .collect();
            let pred: HashSet<usize> = cells
                .iter()
                .copied()
                .filter(|&k| p.pred[l * plane + k] >= EXTENT_THRESHOLD)
                .collect();
            let inter = truth.intersection(&pred).count();
            let union = truth.union(&pred).count();
            iiee += truth.symmetric_difference(&pred).count() as f64;
            iou_t += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            tp += inter;
            fp += pred.difference(&truth).count();
            fneg += truth.difference(&pred).count();
            for &k in &cells {
                let d = p.truth[l * plane + k] as f64 - p.pred[l * plane + k] as f64;
                abs += d.abs();
                sq += d * d;
                count += 1;
            }
        }
        miou += iou_t / tau as f64;
    }
    let f1 = if 2 * tp + fp + fneg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    [
        abs / count as f64,
        (sq / count as f64).sqrt(),
        iiee / (tau * pairs.len()) as f64,
        miou / pairs.len() as f64,
        f1,
    ]
}

fn random_value(rng: &mut ChaCha8Rng) -> f32 {
    match rng.gen_range(0..10) {
        0 => EXTENT_THRESHOLD,
        1 => 0.0,
        2 => 1.0,
        3 => EXTENT_THRESHOLD - 1e-4,
        _ => rng.gen_range(0.0..=1.0),
    }
}

fn c4_metrics() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d0 = NaiveDate::from_ymd_opt(2010, 1, 4).unwrap();
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let (h, w) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let tau = rng.gen_range(1..=4);
        let mut ocean: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.75)).collect();
        ocean[rng.gen_range(0..h * w)] = true;
        let mask = RegionMask::new(h, w, ocean.clone()).unwrap();
        let n_pairs = rng.gen_range(1..=3);
        let pairs: Vec<ForecastPair> = (0..n_pairs)
            .map(|i| ForecastPair {
                truth: (0..tau * h * w).map(|_| random_value(&mut rng)).collect(),
                pred: (0..tau * h * w).map(|_| random_value(&mut rng)).collect(),
                lead_times: tau,
                issue_date: d0 + chrono::Duration::weeks(i as i64),
            })
            .collect();
        let (mae, rmse) = sic_metrics(&pairs, &mask).map_err(|e| e.to_string())?;
        let (iiee, miou, f1) = sie_metrics(&pairs, &mask).map_err(|e| e.to_string())?;
        let want = metric_oracle(&pairs, &ocean);
        for (name, got, want) in ["mae", "rmse", "iiee", "miou", "f1"]
            .iter()
            .zip([mae, rmse, iiee, miou, f1])
            .zip(want)
            .map(|((n, g), w)| (n, g, w))
        {
            let err = (got - want).abs();
            ensure(err <= 1e-12, || format!("trial {trial} {name}: {got} vs oracle {want}"))?;
            worst = worst.max(err);
        }
    }

    // hand case: 5 ice cells, prediction adds 2 more
    let mut truth = vec![0.0f32; 16];
    for k in [0, 1, 2, 5, 6] {
        truth[k] = 0.8;
    }
    let mut pred = truth.clone();
    pred[10] = 0.5;
    pred[11] = EXTENT_THRESHOLD;
    let pair = ForecastPair {
        truth,
        pred,
        lead_times: 1,
        issue_date: d0,
    };
    let (iiee, miou, f1) = sie_metrics(&[pair], &RegionMask::full(4, 4)).map_err(|e| e.to_string())?;
    ensure(iiee == 2.0 && miou == 5.0 / 7.0 && f1 == 10.0 / 12.0, || {
        format!("hand case gave IIEE {iiee}, IoU {miou}, F1 {f1}")
    })?;
    Ok(format!("100 random pair sets agree with the oracle (worst {worst:.1e}); hand case IIEE 2, IoU 5/7, F1 10/12"))
}

// ---------------------------------------------------------------- 5

/// Channel width used for the training-based criteria.
const DESK_BASE: usize = 4;

fn binary_entropy(y: f64) -> f64 {
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(y) + term(1.0 - y)
}

fn c5_overfit() -> Result<String, String> {
    let t0 = Instant::now();
    let data = synth(416, 64, 7);
    let issues: Vec<usize> = (0..8).map(|i| 20 + 45 * i).collect();
    let set = WindowSet::new(&data, issues, 12, 4).map_err(|e| e.to_string())?;
    let idx: Vec<usize> = (0..8).collect();
    let (input, target) = set.batch::<f32>(&idx);
    let mask = set.mask();
    let plane = mask.len();
    let (mut total, mut count) = (0.0, 0usize);
    for (k, &y) in target.data().iter().enumerate() {
        if mask[k % plane] {
            total += binary_entropy(y as f64);
            count += 1;
        }
    }
    let floor = total / count as f64;
    let arch = ArchConfig {
        base_channels: DESK_BASE,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig::default();
    let mut model = Model::<f32>::new(arch, 5).map_err(|e| e.to_string())?;
    let mut adam = AdamState::new(model.params().tensors());
    let mut best = f64::INFINITY;
    for epoch in 1..=500 {
        let loss = train_step(&mut model, &mut adam, &input, &target, &mask, &cfg).map_err(|e| e.to_string())?;
        best = best.min(loss);
        if loss - floor <= 0.05 {
            within(t0, Duration::from_secs(600), "overfitting")?;
            return Ok(format!(
                "loss {loss:.4} within {:.4} of the entropy floor {floor:.4} after {epoch} epochs",
                loss - floor
            ));
        }
    }
    Err(format!("best loss {best:.4} stayed {:.4} above the entropy floor {floor:.4}", best - floor))
}

// ---------------------------------------------------------------- 6

// Early stopping keeps the library patience of 50 epochs.
const E2E_MAX_EPOCHS: usize = 100;

fn c6_end_to_end() -> Result<String, String> {
    let t0 = Instant::now();
    let data = synth(416, 64, 7);
    let folds = span_folds(&data);
    let arch = ArchConfig {
        base_channels: DESK_BASE,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig {
        max_epochs: E2E_MAX_EPOCHS,
        seed: 7,
        ..TrainConfig::default()
    };
    let r = run_fold(&data, &folds[0], &arch, &cfg, None).map_err(|e| e.to_string())?;
    let (m, p, c) = (r.report.overall, r.persistence.overall, r.climatology.overall);
    let detail = format!(
        "{} epochs; MAE model {:.4} / persistence {:.4} / climatology {:.4}; IIEE model {:.1} / persistence {:.1} / climatology {:.1}",
        r.history.len(),
        m.mae,
        p.mae,
        c.mae,
        m.iiee,
        p.iiee,
        c.iiee
    );
    within(t0, Duration::from_secs(45 * 60), "end-to-end run")?;
    let beats = |model: f64, reference: f64| model <= 0.9 * reference;
    ensure(
        beats(m.mae, p.mae) && beats(m.mae, c.mae) && beats(m.iiee, p.iiee) && beats(m.iiee, c.iiee),
        || format!("not 10% better than both references: {detail}"),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn c7_ablation() -> Result<String, String> {
    let data = synth(420, 16, 7);
    let folds = span_folds(&data);
    let base = ArchConfig {
        base_channels: 2,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig {
        max_epochs: 1,
        batch_train: 16,
        batch_val: 16,
        seed: 1,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let table = run_ablations(&data, &folds[..1], &base, &cfg, Some(dir.path())).map_err(|e| e.to_string())?;
    ensure(table.rows.len() == 5, || format!("{} table rows", table.rows.len()))?;
    for v in Variant::ALL {
        let s = table.row(v).ok_or_else(|| format!("missing row {v}"))?;
        ensure(s.values().iter().all(|x| x.is_finite()), || format!("non-finite scores for {v}"))?;
    }
    let csv = std::fs::read_to_string(dir.path().join("ablation_table.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    ensure(lines.len() == 6 && lines[0] == "variant,mae,rmse,iiee,miou,f1", || format!("table csv:\n{csv}"))?;
    ensure(lines[1..].iter().all(|l| l.split(',').count() == 6), || "ragged table rows".into())?;

    let set = WindowSet::new(&data, vec![40, 120, 200], 12, 4).map_err(|e| e.to_string())?;
    let (input, _) = set.batch::<f32>(&[0, 1, 2]);
    let mut full = Model::<f32>::new(Variant::Unicorn.apply(&base), 11).map_err(|e| e.to_string())?;
    zero_dynamics(&mut full);
    let plain = Model::<f32>::new(Variant::NoConvnode.apply(&base), 11).map_err(|e| e.to_string())?;
    ensure(full.predict(&input).unwrap() == plain.predict(&input).unwrap(), || "zeroed dynamics differ from the variant without ConvNODE".into())?;
    let train_logits = |m: &Model<f32>| {
        let mut tape = Tape::new();
        let (pass, _) = m.forward(&mut tape, &input, Mode::Train, false).unwrap();
        tape.value(pass.logits).clone()
    };
    ensure(train_logits(&full) == train_logits(&plain), || "training-mode logits differ".into())?;

    let no_anc = Model::<f32>::new(Variant::NoAncillary.apply(&base), 12).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = input.ancillary.shape();
    let noise = (0..input.ancillary.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let perturbed = ModelInput {
        x: input.x.clone(),
        ancillary: Tensor::from_vec(shape, noise).unwrap(),
    };
    ensure(no_anc.predict(&input).unwrap() == no_anc.predict(&perturbed).unwrap(), || {
        "ancillary perturbation changed the variant without ancillary inputs".into()
    })?;
    let with_anc = Model::<f32>::new(Variant::Unicorn.apply(&base), 12).map_err(|e| e.to_string())?;
    ensure(with_anc.predict(&input).unwrap() != with_anc.predict(&perturbed).unwrap(), || {
        "the full model ignores ancillary inputs".into()
    })?;

    let best = table.best_per_metric();
    let full_best = best.iter().filter(|(_, v)| *v == Variant::Unicorn).count();
    let summary: Vec<String> = best.iter().map(|(m, v)| format!("{m}={v}")).collect();
    Ok(format!(
        "5x5 table written; zeroed dynamics bitwise equal; ancillary invariance holds; full model best on {full_best}/5 metrics (not asserted: {})",
        summary.join(" ")
    ))
}

// ---------------------------------------------------------------- 8

fn c8_protocol() -> Result<String, String> {
    let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).unwrap();
    let (start, end) = (d(1998, 6, 22), d(2021, 6, 14));
    let folds = make_splits(start, end).map_err(|e| e.to_string())?;
    ensure(folds.len() == 4, || format!("{} folds", folds.len()))?;
    use chrono::Datelike;
    for (k, f) in folds.iter().enumerate() {
        let first = 1998 + 3 * k as i32;
        let range = |a: i32, b: i32| DateRange {
            start: d(a, 1, 1),
            end: d(b, 12, 31),
        };
        let train = DateRange {
            start: if k == 0 { start } else { d(first, 1, 1) },
            end: d(first + 10, 12, 31),
        };
        let mut test = range(first + 12, first + 14);
        test.end = test.end.min(end);
        ensure(f.index == k + 1 && f.train == train && f.val == range(first + 11, first + 11) && f.test == test, || {
            format!("fold {} is {f:?}", k + 1)
        })?;
        ensure(f.train.end.year() - f.train.start.year() + 1 == 11, || "training span is not 11 years".into())?;
    }

    // Every sample of every split, enumerated on a weekly calendar over the span.
    let data = generate(&SynthConfig {
        height: 8,
        width: 8,
        n_weeks: ((end - start).num_days() / 7 + 1) as usize,
        start_date: start,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let (l, tau) = (12usize, 4usize);
    let mut samples = 0;
    for f in &folds {
        let mut touched: Vec<HashSet<usize>> = Vec::new();
        for range in [f.train, f.val, f.test] {
            let mut weeks = HashSet::new();
            for t in l - 1..data.len() - tau {
                let window: Vec<usize> = (t + 1 - l..=t + tau).collect();
                let inside = window.iter().all(|&w| range.contains(data.sic.date(w)));
                if inside {
                    weeks.extend(window);
                    samples += 1;
                }
            }
            ensure(!weeks.is_empty(), || format!("fold {}: empty split", f.index))?;
            touched.push(weeks);
        }
        for a in 0..3 {
            for b in a + 1..3 {
                let shared = touched[a].intersection(&touched[b]).count();
                ensure(shared == 0, || format!("fold {}: splits {a} and {b} share {shared} weeks", f.index))?;
            }
        }
        let harness = unicorn_core::evalharness::fold_samples(&data, f, &ArchConfig::default()).map_err(|e| e.to_string())?;
        for (set, range) in [(&harness.train, f.train), (&harness.val, f.val), (&harness.test, f.test)] {
            for &t in set.issues() {
                ensure((t + 1 - l..=t + tau).all(|w| range.contains(data.sic.date(w))), || {
                    format!("fold {}: harness sample at week {t} leaves its split", f.index)
                })?;
            }
        }
    }
    Ok(format!(
        "4 folds, 11/1/3 years, 3-year offsets; {samples} windows checked with no cross-split overlap"
    ))
}

// ---------------------------------------------------------------- 9

fn fold_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let fold = dir.join("fold_1");
    ["checkpoint.uck", "history.csv", "metrics.csv", "metrics_by_lead.csv", "metrics_by_month.csv", "baselines.csv"]
        .iter()
        .map(|n| (n.to_string(), std::fs::read(fold.join(n)).unwrap_or_default()))
        .collect()
}

fn c9_reproducibility() -> Result<String, String> {
    let data = synth(420, 16, 9);
    let folds = span_folds(&data);
    let arch = ArchConfig {
        base_channels: 2,
        ..ArchConfig::default()
    };
    let cfg = TrainConfig {
        max_epochs: 2,
        batch_train: 16,
        batch_val: 16,
        seed: 21,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs: Vec<Vec<(String, Vec<u8>)>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let r = run_fold(&data, &folds[0], &arch, &cfg, None).unwrap();
            write_fold_outputs(&out, &r).unwrap();
            fold_files(&out)
        })
        .collect();
    for ((name, a), (_, b)) in runs[0].iter().zip(&runs[1]) {
        ensure(!a.is_empty(), || format!("{name} missing"))?;
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    let other = run_fold(&data, &folds[0], &arch, &TrainConfig { seed: 22, ..cfg.clone() }, None).map_err(|e| e.to_string())?;
    let out = dir.path().join("c");
    write_fold_outputs(&out, &other).map_err(|e| e.to_string())?;
    ensure(fold_files(&out)[0].1 != runs[0][0].1, || "a different seed gave the same checkpoint".into())?;
    let bytes: usize = runs[0].iter().map(|(_, b)| b.len()).sum();
    Ok(format!("checkpoint, history and 4 metric files ({bytes} bytes) identical across two runs"))
}
