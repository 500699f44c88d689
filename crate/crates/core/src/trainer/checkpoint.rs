//! `CSIT` checkpoint files: configs, vocabulary, step, every parameter tensor
//! with its Adam moments, and a SHA-256 trailer.

use std::path::Path;

use super::{TrainConfig, TrainError, TrainState};
use crate::model::{param_shapes, ModelConfig, ModelParams, ModelWeights, Retriever};
use crate::numeric::{AdamState, Tensor};
use crate::persist::{atomic_write, seal, unseal, Reader, Writer};
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSIT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or to serve the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn retriever(&self) -> Result<Retriever, TrainError> {
        Ok(Retriever::new(self.state.weights.clone(), self.vocab.clone())?)
    }
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.blob(&serde_json::to_vec(&ck.state.weights.config).expect("config serializes"));
    w.blob(&serde_json::to_vec(&ck.train_config).expect("config serializes"));
    w.blob(&serde_json::to_vec(&ck.vocab).expect("vocab serializes"));
    w.u64(ck.state.step as u64);
    w.u64(ck.state.adam.step);
    let params = ck.state.weights.params.iter();
    w.u64(params.len() as u64);
    for (i, (name, t)) in ck.state.weights.params.names().iter().zip(params).enumerate() {
        w.blob(name.as_bytes());
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
        w.f64s(&ck.state.adam.m[i]);
        w.f64s(&ck.state.adam.v[i]);
    }
    seal(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic, not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Incompatible {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let body = unseal(bytes).map_err(corrupt)?;
    let mut r = Reader::new(&body[8..]);
    let json = |r: &mut Reader, what: &str| -> Result<serde_json::Value, TrainError> {
        let raw = r.blob(what).map_err(corrupt)?;
        serde_json::from_slice(raw).map_err(|e| corrupt(format!("{what}: {e}")))
    };
    let model: ModelConfig = serde_json::from_value(json(&mut r, "model config")?)
        .map_err(|e| corrupt(format!("model config: {e}")))?;
    let train_config: TrainConfig = serde_json::from_value(json(&mut r, "train config")?)
        .map_err(|e| corrupt(format!("train config: {e}")))?;
    let vocab: Vocabulary = serde_json::from_value(json(&mut r, "vocabulary")?)
        .map_err(|e| corrupt(format!("vocabulary: {e}")))?;
    model.validate()?;
    let step = r.len("step").map_err(corrupt)?;
    let adam_step = r.u64("adam step").map_err(corrupt)?;
    let count = r.len("parameter count").map_err(corrupt)?;
    let shapes = param_shapes(&model);
    if count != shapes.len() {
        return Err(corrupt(format!(
            "{count} parameter tensors, model needs {}",
            shapes.len()
        )));
    }
    let names = ModelParams::from_list(model.n_layers, shapes.iter().cloned())
        .expect("layout")
        .names();
    let mut tensors = Vec::with_capacity(count);
    let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
    for (name, shape) in names.iter().zip(&shapes) {
        let found = r.blob("parameter name").map_err(corrupt)?;
        if found != name.as_bytes() {
            return Err(corrupt(format!(
                "expected parameter {name}, found {}",
                String::from_utf8_lossy(found)
            )));
        }
        let ndim = r.u32("rank").map_err(corrupt)? as usize;
        let dims = (0..ndim)
            .map(|_| r.len("dimension"))
            .collect::<Result<Vec<_>, _>>()
            .map_err(corrupt)?;
        if &dims != shape {
            return Err(corrupt(format!("{name}: shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = dims.iter().product();
        tensors.push(Tensor::new(dims, r.f64s(n, name).map_err(corrupt)?)?);
        m.push(r.f64s(n, name).map_err(corrupt)?);
        v.push(r.f64s(n, name).map_err(corrupt)?);
    }
    r.finish().map_err(corrupt)?;
    let params = ModelParams::from_list(model.n_layers, tensors).expect("layout");
    let weights = ModelWeights {
        config: model,
        params,
    };
    weights.validate()?;
    Ok(Checkpoint {
        state: TrainState {
            weights,
            adam: AdamState {
                step: adam_step,
                m,
                v,
            },
            step,
        },
        train_config,
        vocab,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    atomic_write(path, &encode_checkpoint(ck)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
