//! Binary checkpoint: `UNSP`, a version byte, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f64`s in
//! header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::config::{Phase, TrainConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"UNSP";
pub const VERSION: u8 = 1;
const PREFIX: usize = 4 + 1 + 8;
const MAX_HEADER: u64 = 1 << 26;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    /// Hex SHA-256 of the corpus the run trained on.
    pub fingerprint: String,
    pub params: ModelParams,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    phase: Phase,
    step: u64,
    fingerprint: String,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["param", "adam.m", "adam.v"];

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn phase(&self) -> Phase {
        self.train.phase
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    fn groups(&self) -> [&BTreeMap<String, Tensor>; 3] {
        [self.params.as_map(), &self.adam.m, &self.adam.v]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (group, map) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in map {
                tensors.push(TensorEntry {
                    name: format!("{group}/{name}"),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += 8 * t.numel() as u64;
            }
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            phase: self.train.phase,
            step: self.step,
            fingerprint: self.fingerprint.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for map in self.groups() {
            for t in map.values() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX {
            return Err(bad("file too short for a checkpoint prefix"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("missing UNSP magic"));
        }
        if bytes[4] != VERSION {
            return Err(bad(format!("unsupported version {} (expected {VERSION})", bytes[4])));
        }
        let hlen = u64::from_le_bytes(bytes[5..PREFIX].try_into().expect("8 bytes"));
        if hlen > MAX_HEADER || hlen > (bytes.len() - PREFIX) as u64 {
            return Err(bad(format!("header length {hlen} exceeds file size {}", bytes.len())));
        }
        let body_start = PREFIX + hlen as usize;
        let header: Header = serde_json::from_slice(&bytes[PREFIX..body_start])
            .map_err(|e| bad(format!("header: {e}")))?;
        if header.phase != header.train.phase {
            return Err(bad("phase tag disagrees with the training config"));
        }
        let body = &bytes[body_start..];
        let mut maps: [BTreeMap<String, Tensor>; 3] = Default::default();
        let mut expected = 0u64;
        let mut last_slot = 0;
        for e in header.tensors {
            if e.offset != expected {
                return Err(bad(format!("tensor {} at offset {} (expected {expected})", e.name, e.offset)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .filter(|&n| n > 0 && n <= body.len() as u64 / 8)
                .ok_or_else(|| bad(format!("tensor {} has invalid shape {:?}", e.name, e.shape)))?;
            let end = e.offset + 8 * numel;
            if end > body.len() as u64 {
                return Err(bad(format!("tensor {} runs past the end of the file", e.name)));
            }
            let data = body[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let (group, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| bad(format!("tensor name {:?} lacks a group", e.name)))?;
            let slot = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| bad(format!("unknown tensor group {group:?}")))?;
            if slot < last_slot {
                return Err(bad("tensor groups out of order"));
            }
            last_slot = slot;
            let t = Tensor::new(e.shape, data)?;
            if let Some(prev) = maps[slot].keys().next_back() {
                if prev.as_str() >= name {
                    return Err(bad(format!("tensor {name:?} out of order")));
                }
            }
            maps[slot].insert(name.to_string(), t);
            expected = end;
        }
        if expected != body.len() as u64 {
            return Err(bad(format!("{} trailing bytes", body.len() as u64 - expected)));
        }
        header
            .model
            .validate()
            .map_err(|e| bad(format!("model config: {e}")))?;
        let [params, m, v] = maps;
        let params = ModelParams::from_map(params);
        params
            .validate(&header.model)
            .map_err(|e| bad(format!("parameters do not match the model config: {e}")))?;
        for moments in [&m, &v] {
            let same = moments.len() == params.len()
                && moments
                    .iter()
                    .zip(params.iter())
                    .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
            if !same {
                return Err(bad("optimizer state does not match the parameters"));
            }
        }
        header.train.validate().map_err(|e| bad(format!("training config: {e}")))?;
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            step: header.step,
            fingerprint: header.fingerprint,
            params,
            adam: AdamState { m, v },
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, ckpt.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
