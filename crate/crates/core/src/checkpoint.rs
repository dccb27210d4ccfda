//! Binary run-state files.
//!
//! Layout: the 8-byte magic `ADRCKPT1`, a little-endian `u32` manifest length,
//! the UTF-8 JSON manifest, the tensor blobs as little-endian `f64` in manifest
//! order, and a trailing little-endian CRC-64/XZ of every preceding byte.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::models::{ModelSpec, ParamSet};
use crate::numerics::Tensor;
use crate::optim::{EmaState, SgdState};
use crate::train::{BestSnapshot, EpochMetrics, RunState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"ADRCKPT1";
pub const FORMAT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const HEADER_LEN: usize = MAGIC.len() + 4;
const TRAILER_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("invalid checkpoint manifest: {0}")]
    Manifest(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ScheduleState {
    epoch: usize,
    iteration: u64,
    tau: Option<f64>,
    lambda: Option<f64>,
    lr: f64,
}

/// Random streams are keyed by seed and counters, so the counters are the state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    algorithm: String,
    seed: u64,
    shuffle_index: u64,
    step_index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BestInfo {
    epoch: usize,
    val_rob_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelSpec,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
    schedule: ScheduleState,
    epoch: usize,
    iteration: u64,
    rng: RngState,
    ema_decay: f64,
    best: Option<BestInfo>,
    history: Vec<EpochMetrics>,
}

const GROUPS: [&str; 5] = ["student", "teacher", "velocity", "best.student", "best.teacher"];

fn groups(state: &RunState) -> Vec<(&'static str, &ParamSet)> {
    let mut out = vec![
        (GROUPS[0], &state.student),
        (GROUPS[1], &state.ema.teacher),
        (GROUPS[2], &state.optimizer.velocity),
    ];
    if let Some(b) = &state.best {
        out.push((GROUPS[3], &b.student));
        out.push((GROUPS[4], &b.teacher));
    }
    out
}

/// Serializes a run state into checkpoint bytes.
pub fn to_bytes(state: &RunState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (group, set) in groups(state) {
        for (name, t) in set.iter() {
            tensors.push(TensorEntry {
                name: format!("{group}/{name}"),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sched = state.schedule_values();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: state.spec().clone(),
        config: state.config.clone(),
        tensors,
        schedule: ScheduleState {
            epoch: state.epoch,
            iteration: state.iteration,
            tau: sched.map(|s| s.0),
            lambda: sched.map(|s| s.1),
            lr: state.learning_rate(),
        },
        epoch: state.epoch,
        iteration: state.iteration,
        rng: RngState {
            algorithm: "chacha8".into(),
            seed: state.config.seed,
            shuffle_index: state.epoch as u64,
            step_index: state.iteration,
        },
        ema_decay: state.ema.decay,
        best: state.best.as_ref().map(|b| BestInfo {
            epoch: b.epoch,
            val_rob_acc: b.val_rob_acc,
        }),
        history: state.history.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len() + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn manifest_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Manifest(msg.into())
}

/// Parses checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<RunState> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(CheckpointError::Truncated(format!("{} bytes", bytes.len())).into());
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < HEADER_LEN + mlen + TRAILER_LEN {
        return Err(CheckpointError::Truncated(format!(
            "manifest of {mlen} bytes does not fit in {} bytes",
            bytes.len()
        ))
        .into());
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }
    let json = &body[HEADER_LEN..HEADER_LEN + mlen];
    let raw: serde_json::Value = serde_json::from_slice(json).map_err(|e| manifest_err(e.to_string()))?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| manifest_err("missing format_version"))?;
    if found != FORMAT_VERSION as u64 {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| manifest_err(e.to_string()))?;
    let blob = &body[HEADER_LEN + mlen..];
    restore(m, blob)
}

fn restore(m: Manifest, blob: &[u8]) -> Result<RunState> {
    if m.model != m.config.model {
        return Err(manifest_err("model spec disagrees with the embedded config").into());
    }
    let layout = m.model.layout();
    let n_groups = if m.best.is_some() { 5 } else { 3 };
    if m.tensors.len() != n_groups * layout.len() {
        return Err(manifest_err(format!(
            "{} tensors listed, expected {}",
            m.tensors.len(),
            n_groups * layout.len()
        ))
        .into());
    }
    let mut cursor = 0usize;
    let mut sets = Vec::with_capacity(n_groups);
    for (g, chunk) in m.tensors.chunks(layout.len()).enumerate() {
        let mut entries = Vec::with_capacity(layout.len());
        for (entry, info) in chunk.iter().zip(&layout) {
            let expected_name = format!("{}/{}", GROUPS[g], info.name);
            if entry.name != expected_name || entry.shape != info.shape {
                return Err(manifest_err(format!(
                    "tensor '{}' {:?} where '{}' {:?} was expected",
                    entry.name, entry.shape, expected_name, info.shape
                ))
                .into());
            }
            if entry.offset != cursor {
                return Err(manifest_err(format!("tensor '{}' at offset {} (expected {cursor})", entry.name, entry.offset)).into());
            }
            let len: usize = entry.shape.iter().product();
            let end = cursor + 8 * len;
            if end > blob.len() {
                return Err(CheckpointError::Truncated(format!("blob for '{}' ends past the data", entry.name)).into());
            }
            let data = blob[cursor..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            entries.push((info.name.clone(), Tensor::new(entry.shape.clone(), data)?));
            cursor = end;
        }
        sets.push(ParamSet::new(entries));
    }
    if cursor != blob.len() {
        return Err(manifest_err(format!("{} trailing blob bytes", blob.len() - cursor)).into());
    }
    let mut sets = sets.into_iter();
    let student = sets.next().expect("student");
    let teacher = sets.next().expect("teacher");
    let velocity = sets.next().expect("velocity");
    let best = match m.best {
        Some(info) => Some(BestSnapshot {
            epoch: info.epoch,
            val_rob_acc: info.val_rob_acc,
            student: sets.next().expect("best student"),
            teacher: sets.next().expect("best teacher"),
        }),
        None => None,
    };
    let state = RunState {
        config: m.config,
        student,
        ema: EmaState {
            teacher,
            decay: m.ema_decay,
        },
        optimizer: SgdState { velocity },
        epoch: m.epoch,
        iteration: m.iteration,
        history: m.history,
        best,
    };
    state
        .check_consistency()
        .map_err(|e| manifest_err(format!("inconsistent run state: {e}")))?;
    Ok(state)
}

pub fn save_checkpoint(state: &RunState, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(state)?;
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RunState> {
    from_bytes(&fs::read(path)?)
}
