//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `SCSEGCP1`, a little-endian `u32` length, that
//! many bytes of JSON metadata, then every parameter tensor in store order
//! as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{build_model, ModelSpec, ParamStore};

pub const MAGIC: &[u8; 8] = b"SCSEGCP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub seed: u64,
    pub epoch: usize,
    /// Monitored value of the saved epoch, if any.
    pub monitor: Option<f64>,
    pub adam_steps: u64,
    /// Name and shape of every stored tensor, in order.
    pub params: Vec<(String, Vec<usize>)>,
}

impl CheckpointMeta {
    pub fn new(spec: &ModelSpec, store: &ParamStore<f32>, seed: u64, epoch: usize, monitor: f64, adam_steps: u64) -> Self {
        Self {
            spec: spec.clone(),
            seed,
            epoch,
            monitor: monitor.is_finite().then_some(monitor),
            adam_steps,
            params: store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.tensor.shape().to_vec()))
                .collect(),
        }
    }
}

pub fn encode(meta: &CheckpointMeta, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::InvalidArgument("metadata too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * store.trainable_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for e in store.entries() {
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(detail.into())
}

/// Parses a checkpoint and rebuilds its parameter store.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, ParamStore<f32>)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic header"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| corrupt("truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| corrupt(format!("metadata: {e}")))?;
    let (_, mut store) = build_model::<f32>(&meta.spec, 0).map_err(|e| corrupt(format!("model spec: {e}")))?;
    let layout: Vec<(String, Vec<usize>)> = store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.tensor.shape().to_vec()))
        .collect();
    if layout != meta.params {
        return Err(corrupt("parameter layout does not match the model spec"));
    }
    let mut body = &bytes[12 + len..];
    for i in 0..store.len() {
        let n = store.entry(i).tensor.len();
        if body.len() < 4 * n {
            return Err(corrupt(format!("truncated at parameter {}", store.entry(i).name)));
        }
        let (chunk, rest) = body.split_at(4 * n);
        for (dst, src) in store.tensor_mut(i).data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
        body = rest;
    }
    if !body.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", body.len())));
    }
    Ok((meta, store))
}

pub fn save(path: &Path, meta: &CheckpointMeta, store: &ParamStore<f32>) -> Result<()> {
    let bytes = encode(meta, store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, ParamStore<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
