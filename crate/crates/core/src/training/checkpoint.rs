//! Checkpoint file layout (integers little-endian):
//!
//! ```text
//! 55 43 4B 31           magic "UCK1"
//! u32 header length
//! JSON header           configs, counters, tensor names/kinds/shapes
//! f32 blobs             in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffops::Tensor;
use crate::gridio::write_atomic;
use crate::unetnode::{ArchConfig, Model, NamedTensors};

use super::{AdamState, EarlyStopper, TrainConfig, TrainError};

pub const CHECKPOINT_MAGIC: [u8; 4] = [0x55, 0x43, 0x4B, 0x31];
pub const CHECKPOINT_VERSION: u32 = 1;

/// Full training state after `epoch` completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub stopper: EarlyStopper,
    pub params: NamedTensors<f32>,
    pub buffers: NamedTensors<f32>,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    /// Best validation loss seen up to this checkpoint.
    pub fn best_val_loss(&self) -> Option<f64> {
        self.stopper.best
    }

    /// Rebuilds the model with the stored parameters and running statistics.
    pub fn model(&self) -> Result<Model<f32>, TrainError> {
        let mut model = Model::new(self.arch.clone(), 0)?;
        model.load_state(self.params.clone(), self.buffers.clone())?;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Kind,
    shape: [usize; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: ArchConfig,
    train: TrainConfig,
    epoch: usize,
    adam_step: u64,
    stopper: EarlyStopper,
    tensors: Vec<Entry>,
}

fn entries<'a>(
    set: &'a NamedTensors<f32>,
    kind: Kind,
) -> impl Iterator<Item = (Entry, &'a Tensor<f32>)> + 'a {
    set.iter().map(move |(name, t)| {
        (
            Entry {
                name: name.to_string(),
                kind,
                shape: t.shape(),
            },
            t,
        )
    })
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, TrainError> {
    let mut moments_m = NamedTensors::default();
    let mut moments_v = NamedTensors::default();
    if ck.adam.m.len() != ck.params.len() || ck.adam.v.len() != ck.params.len() {
        return Err(TrainError::Format("optimizer moments do not match parameters".into()));
    }
    for ((name, m), v) in ck.params.names().iter().zip(&ck.adam.m).zip(&ck.adam.v) {
        moments_m.push(name.clone(), m.clone());
        moments_v.push(name.clone(), v.clone());
    }
    let all: Vec<(Entry, &Tensor<f32>)> = entries(&ck.params, Kind::Param)
        .chain(entries(&ck.buffers, Kind::Buffer))
        .chain(entries(&moments_m, Kind::AdamM))
        .chain(entries(&moments_v, Kind::AdamV))
        .collect();
    let tensors: Vec<&Tensor<f32>> = all.iter().map(|(_, t)| *t).collect();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        arch: ck.arch.clone(),
        train: ck.train.clone(),
        epoch: ck.epoch,
        adam_step: ck.adam.step,
        stopper: ck.stopper.clone(),
        tensors: all.into_iter().map(|(e, _)| e).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| TrainError::Format(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| TrainError::Format("header too large".into()))?;
    let numel: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 4 * numel);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    if bytes.len() < 8 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(TrainError::Format("bad magic".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| TrainError::Format("truncated header".into()))?;
    let version: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| TrainError::Format(e.to_string()))?;
    let found = version.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(version).map_err(|e| TrainError::Format(e.to_string()))?;
    let mut blob = &bytes[8 + len..];
    let mut params = NamedTensors::default();
    let mut buffers = NamedTensors::default();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for e in header.tensors {
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= blob.len()))
            .ok_or_else(|| TrainError::Format(format!("truncated data for {}", e.name)))?;
        let data = blob[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blob = &blob[4 * n..];
        let t = Tensor::from_vec(e.shape, data).map_err(|err| TrainError::Format(err.to_string()))?;
        match e.kind {
            Kind::Param => {
                params.push(e.name, t);
            }
            Kind::Buffer => {
                buffers.push(e.name, t);
            }
            Kind::AdamM => m.push(t),
            Kind::AdamV => v.push(t),
        }
    }
    if !blob.is_empty() {
        return Err(TrainError::Format(format!("{} trailing bytes", blob.len())));
    }
    if m.len() != params.len() || v.len() != params.len() {
        return Err(TrainError::Format("optimizer moments do not match parameters".into()));
    }
    Ok(Checkpoint {
        arch: header.arch,
        train: header.train,
        epoch: header.epoch,
        stopper: header.stopper,
        params,
        buffers,
        adam: AdamState {
            m,
            v,
            step: header.adam_step,
        },
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), TrainError> {
    write_atomic(path, &encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    decode_checkpoint(&fs::read(path)?)
}
