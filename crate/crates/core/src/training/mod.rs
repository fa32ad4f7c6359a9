//! Masked BCE loss, AdamW, early stopping, the epoch loop and checkpoints.

mod checkpoint;
mod data;

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffops::{DiffError, Scalar, Tape, Tensor, Var};
use crate::gridio::GridError;
use crate::unetnode::{Mode, Model, ModelError};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use data::{input_at, WindowSet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("non-finite gradient for {name}")]
    NonFiniteGradient { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_train: usize,
    pub batch_val: usize,
    pub batch_test: usize,
    /// Consecutive non-improving validations before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_train: 8,
            batch_val: 8,
            batch_test: 1,
            patience: 50,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.batch_train == 0 || self.batch_val == 0 || self.batch_test == 0 {
            return bad("batch sizes must be >= 1");
        }
        Ok(())
    }
}

/// Records the masked mean BCE of `logits` against `target` on the tape.
pub fn bce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &Tensor<T>,
    mask: &Arc<Vec<bool>>,
) -> Result<Var, TrainError> {
    if target.data().iter().any(|v| !(T::zero()..=T::one()).contains(v)) {
        return Err(TrainError::Config("BCE targets must lie in [0, 1]".into()));
    }
    Ok(tape.masked_bce(logits, target.clone(), mask.clone())?)
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`.
pub fn adamw_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config("parameter, gradient and moment counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TrainError::Config(format!("shape mismatch for parameter {i}")));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient { name: format!("#{i}") });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((th, &gr), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let gr = gr.as_f64();
            let m_new = b1 * mi.as_f64() + (1.0 - b1) * gr;
            let v_new = b2 * vi.as_f64() + (1.0 - b2) * gr * gr;
            *mi = T::lit(m_new);
            *vi = T::lit(v_new);
            let (mh, vh) = (mi.as_f64() / c1, vi.as_f64() / c2);
            let old = th.as_f64();
            *th = T::lit(old - cfg.lr * mh / (vh.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * old);
        }
    }
    Ok(())
}

/// Patience-based stopping on a strictly improving validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_evaluations: usize,
    pub evaluations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: None,
            bad_evaluations: 0,
            evaluations: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        self.evaluations += 1;
        let improved = self.best.map_or(true, |b| loss < b);
        if improved {
            self.best = Some(loss);
            self.best_epoch = Some(epoch);
            self.bad_evaluations = 0;
        } else {
            self.bad_evaluations += 1;
        }
        StopDecision {
            improved,
            stop: self.bad_evaluations >= self.patience,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_loss);
    }
    out
}

/// Mean masked BCE over a sample set in evaluation mode.
pub fn evaluate_loss(model: &Model<f32>, set: &WindowSet<'_>, batch: usize) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Err(TrainError::Config("cannot evaluate an empty sample set".into()));
    }
    let mask = set.mask();
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let (input, target) = set.batch::<f32>(chunk);
        let mut tape = Tape::new();
        let (pass, _) = model.forward(&mut tape, &input, Mode::Eval, false)?;
        let loss = bce_loss(&mut tape, pass.logits, &target, &mask)?;
        total += tape.value(loss).data()[0].as_f64() * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// One optimizer step on a batch; returns the batch loss before the update.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    input: &crate::unetnode::ModelInput<f32>,
    target: &Tensor<f32>,
    mask: &Arc<Vec<bool>>,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let (pass, params) = model.forward(&mut tape, input, Mode::Train, true)?;
    let loss = bce_loss(&mut tape, pass.logits, target, mask)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(TrainError::Divergence {
            epoch: 0,
            batch: 0,
            loss: value,
        });
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor<f32>> = params
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(TrainError::NonFiniteGradient {
            name: model.params().names()[i].clone(),
        });
    }
    adamw_step(model.params_mut().tensors_mut(), &grads, adam, cfg)?;
    model.apply_bn_updates(&pass.bn_updates);
    Ok(value)
}

/// Result of [`train`]: the best-validation and the final state.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// `None` only when a resumed run never improved on the stored best.
    pub best: Option<Checkpoint>,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Order of training samples in `epoch`, independent of earlier epochs.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Trains `model` from scratch or continues from `resume`, validating after
/// every epoch.
pub fn train(
    mut model: Model<f32>,
    train_set: &WindowSet<'_>,
    val_set: &WindowSet<'_>,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config(format!(
            "{} training and {} validation samples",
            train_set.len(),
            val_set.len()
        )));
    }
    let (mut adam, mut stopper, start_epoch) = match resume {
        Some(ck) => {
            model = ck.model()?;
            (ck.adam.clone(), ck.stopper.clone(), ck.epoch)
        }
        None => (
            AdamState::new(model.params().tensors()),
            EarlyStopper::new(cfg.patience),
            0,
        ),
    };
    let mask = train_set.mask();
    let snapshot = |model: &Model<f32>, adam: &AdamState<f32>, stopper: &EarlyStopper, epoch: usize| Checkpoint {
        arch: model.config().clone(),
        train: cfg.clone(),
        epoch,
        stopper: stopper.clone(),
        params: model.params().clone(),
        buffers: model.buffers().clone(),
        adam: adam.clone(),
    };
    let mut history = Vec::new();
    let mut best = None;
    let mut stopped_early = false;
    for epoch in start_epoch + 1..=cfg.max_epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_train).enumerate() {
            let (input, target) = train_set.batch::<f32>(chunk);
            let loss = train_step(&mut model, &mut adam, &input, &target, &mask, cfg).map_err(|e| match e {
                TrainError::Divergence { loss, .. } => TrainError::Divergence { epoch, batch: b, loss },
                other => other,
            })?;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = evaluate_loss(&model, val_set, cfg.batch_val)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                batch: 0,
                loss: val_loss,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let decision = stopper.observe(epoch, val_loss);
        if decision.improved {
            best = Some(snapshot(&model, &adam, &stopper, epoch));
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }
    let last_epoch = history.last().map_or(start_epoch, |r| r.epoch);
    Ok(TrainOutcome {
        best,
        last: snapshot(&model, &adam, &stopper, last_epoch),
        history,
        stopped_early,
    })
}
