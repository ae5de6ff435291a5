//! Little-endian binary checkpoints.
//!
//! Layout: magic `TYRK`, format version `u32`, record count `u32`, then
//! records of (name length `u32`, name bytes, rank `u32`, dims `u32`×rank,
//! payload). Tensor records carry `f32` payloads. Two byte records, whose
//! single dim is the byte length, hold the model config (`__config__`, the
//! key-value text) and run metadata (`__meta__`, JSON). Batch-norm running
//! statistics are stored as `<name>#mean` / `<name>#var`; optimizer moments
//! as `__adam_m__/<param>` / `__adam_v__/<param>`. Records are written in
//! name order, so saving the same state always produces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelGraph};
use crate::nn::{Param, ParamStore};
use crate::tensor::ops::RunningStats;

use super::optim::{AdamWParams, Moments, OptimState};

pub const MAGIC: &[u8; 4] = b"TYRK";
pub const FORMAT_VERSION: u32 = 1;
const CONFIG_RECORD: &str = "__config__";
const META_RECORD: &str = "__meta__";
const M_PREFIX: &str = "__adam_m__/";
const V_PREFIX: &str = "__adam_v__/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    model_seed: u64,
    trainable: Vec<String>,
    optimizer: Option<OptimMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimMeta {
    step: u64,
    hyper: AdamWParams,
}

enum Payload<'a> {
    F32(&'a [f32]),
    Bytes(&'a [u8]),
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit a u32 checkpoint field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], payload: Payload) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len())?;
    for &d in dims {
        put_u32(out, d)?;
    }
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::Bytes(b) => out.extend_from_slice(b),
    }
    Ok(())
}

/// Serializes a model and, optionally, its optimizer state.
pub fn encode_checkpoint(model: &ModelGraph, optim: Option<&OptimState>) -> Result<Vec<u8>> {
    let store = model.store();
    let config = model.config().to_kv_string();
    let meta = Meta {
        model_seed: model.seed(),
        trainable: store
            .params()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect(),
        optimizer: optim.map(|o| OptimMeta {
            step: o.step,
            hyper: o.hyper,
        }),
    };
    let meta = serde_json::to_vec(&meta)?;

    let mut records: BTreeMap<String, (Vec<usize>, Payload)> = BTreeMap::new();
    records.insert(
        CONFIG_RECORD.into(),
        (vec![config.len()], Payload::Bytes(config.as_bytes())),
    );
    records.insert(META_RECORD.into(), (vec![meta.len()], Payload::Bytes(&meta)));
    for (name, p) in store.params() {
        records.insert(name.clone(), (p.shape.clone(), Payload::F32(&p.data)));
    }
    for (name, s) in store.all_stats() {
        records.insert(format!("{name}#mean"), (vec![s.mean.len()], Payload::F32(&s.mean)));
        records.insert(format!("{name}#var"), (vec![s.var.len()], Payload::F32(&s.var)));
    }
    if let Some(o) = optim {
        for (name, m) in &o.moments {
            records.insert(format!("{M_PREFIX}{name}"), (vec![m.m.len()], Payload::F32(&m.m)));
            records.insert(format!("{V_PREFIX}{name}"), (vec![m.v.len()], Payload::F32(&m.v)));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, records.len())?;
    for (name, (dims, payload)) in records {
        put_record(&mut out, &name, &dims, payload)?;
    }
    Ok(out)
}

pub fn save_checkpoint(model: &ModelGraph, optim: Option<&OptimState>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, optim)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Everything stored in a checkpoint, before it is bound to a graph.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub model_seed: u64,
    pub store: ParamStore,
    pub optim: Option<OptimState>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u32()?;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    let (mut config, mut meta) = (None, None);
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: dims overflow")))?;
        if name == CONFIG_RECORD || name == META_RECORD {
            let text = std::str::from_utf8(r.take(numel)?)
                .map_err(|_| Error::CorruptCheckpoint(format!("{name} is not UTF-8")))?
                .to_string();
            if name == CONFIG_RECORD {
                config = Some(text);
            } else {
                meta = Some(text);
            }
            continue;
        }
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: size overflow")))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate record {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let config = config.ok_or_else(|| Error::CorruptCheckpoint("missing __config__ record".into()))?;
    let config = ModelConfig::parse(&config).map_err(|e| Error::CorruptCheckpoint(format!("stored config: {e}")))?;
    let meta = meta.ok_or_else(|| Error::CorruptCheckpoint("missing __meta__ record".into()))?;
    let meta: Meta =
        serde_json::from_str(&meta).map_err(|e| Error::CorruptCheckpoint(format!("stored metadata: {e}")))?;

    let mut store = ParamStore::new();
    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    let mut ms = BTreeMap::new();
    let mut vs = BTreeMap::new();
    for (name, (dims, data)) in tensors {
        if let Some(p) = name.strip_prefix(M_PREFIX) {
            ms.insert(p.to_string(), data);
        } else if let Some(p) = name.strip_prefix(V_PREFIX) {
            vs.insert(p.to_string(), data);
        } else if let Some(s) = name.strip_suffix("#mean") {
            means.insert(s.to_string(), data);
        } else if let Some(s) = name.strip_suffix("#var") {
            vars.insert(s.to_string(), data);
        } else {
            let trainable = meta.trainable.binary_search(&name).is_ok();
            store.insert(
                name,
                Param {
                    shape: dims,
                    data,
                    trainable,
                },
            );
        }
    }
    for (name, mean) in means {
        let var = vars
            .remove(&name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{name} has a mean but no variance record")))?;
        if var.len() != mean.len() {
            return Err(Error::CorruptCheckpoint(format!("{name} statistics lengths differ")));
        }
        store.set_stats(name, RunningStats { mean, var });
    }
    if let Some(name) = vars.keys().next() {
        return Err(Error::CorruptCheckpoint(format!(
            "{name} has a variance but no mean record"
        )));
    }
    let optim = match meta.optimizer {
        None if ms.is_empty() && vs.is_empty() => None,
        None => {
            return Err(Error::CorruptCheckpoint(
                "optimizer moments without optimizer metadata".into(),
            ))
        }
        Some(o) => {
            let mut moments = BTreeMap::new();
            for (name, m) in ms {
                let v = vs
                    .remove(&name)
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("{name} has a first moment but no second")))?;
                if store
                    .get(&name)
                    .is_none_or(|p| p.data.len() != m.len() || m.len() != v.len())
                {
                    return Err(Error::CorruptCheckpoint(format!(
                        "optimizer moments for {name} do not match a parameter"
                    )));
                }
                moments.insert(name, Moments { m, v });
            }
            if let Some(name) = vs.keys().next() {
                return Err(Error::CorruptCheckpoint(format!(
                    "{name} has a second moment but no first"
                )));
            }
            Some(OptimState {
                hyper: o.hyper,
                step: o.step,
                moments,
            })
        }
    };
    Ok(Checkpoint {
        config,
        model_seed: meta.model_seed,
        store,
        optim,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Rebuilds the stored model and returns it with the optimizer state.
pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, Option<OptimState>)> {
    let ck = read_checkpoint(path)?;
    let mut model = ModelGraph::build(&ck.config, ck.model_seed)?;
    model.set_store(ck.store)?;
    Ok((model, ck.optim))
}

/// Loads checkpoint parameters into an existing (possibly trimmed) graph.
/// Extra parameters are ignored; missing ones are an error listing them.
pub fn load_into(model: &mut ModelGraph, path: &Path) -> Result<Option<OptimState>> {
    let ck = read_checkpoint(path)?;
    model.set_store(ck.store)?;
    Ok(ck.optim.map(|mut o| {
        o.moments.retain(|name, _| model.store().get(name).is_some());
        o
    }))
}
