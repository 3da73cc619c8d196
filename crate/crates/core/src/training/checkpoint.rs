//! Versioned weight archives.
//!
//! Layout: 8-byte magic, u32 schema version, u32 header length, JSON header,
//! the tensors as little-endian f32 in header order, and a trailing CRC-32 of
//! everything before it.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::EpochRecord;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};

pub const MAGIC: &[u8; 8] = b"MOSNETCK";
pub const SCHEMA_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainable: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    epoch: Option<usize>,
    #[serde(default)]
    adam_step: Option<u64>,
    #[serde(default)]
    history: Vec<EpochRecord>,
}

/// A restored archive.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    /// Last completed epoch, for training checkpoints.
    pub epoch: Option<usize>,
    pub optimizer: Option<AdamState>,
    pub history: Vec<EpochRecord>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Save the weights of `net` alone.
pub fn checkpoint(net: &Network, path: &Path) -> Result<()> {
    save_checkpoint(path, net, None, None, &[])
}

pub fn save_checkpoint(
    path: &Path,
    net: &Network,
    epoch: Option<usize>,
    optimizer: Option<&AdamState>,
    history: &[EpochRecord],
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<&[f32]> = Vec::new();
    for p in net.params() {
        tensors.push(TensorEntry {
            name: p.key(),
            len: p.data.len(),
            trainable: Some(p.trainable),
        });
        data.push(&p.data);
    }
    if let Some(opt) = optimizer {
        for (i, p) in net.params().iter().enumerate() {
            if opt.m.get(i).is_some_and(|m| !m.is_empty()) {
                for (prefix, src) in [(ADAM_M, &opt.m[i]), (ADAM_V, &opt.v[i])] {
                    tensors.push(TensorEntry {
                        name: format!("{prefix}{}", p.key()),
                        len: src.len(),
                        trainable: None,
                    });
                    data.push(src);
                }
            }
        }
    }
    let header = Header {
        schema_version: SCHEMA_VERSION,
        model: net.config().clone(),
        tensors,
        epoch,
        adam_step: optimizer.map(|o| o.step),
        history: history.to_vec(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let total: usize = data.iter().map(|d| d.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + total * 4 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for d in data {
        for v in d {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load an archive written by [`save_checkpoint`].
pub fn restore(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Load an archive and check it was built for the same architecture.
pub fn restore_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = restore(path)?;
    let got = ck.network.config();
    if got.n != expected.n {
        return Err(corrupt(format!(
            "{} holds a model with n = {}, but n = {} was requested",
            path.display(),
            got.n,
            expected.n
        )));
    }
    let same_arch = got.base_filters_scale == expected.base_filters_scale
        && got.use_low_level_conv3d == expected.use_low_level_conv3d
        && got.use_fusion == expected.use_fusion
        && got.use_batch_norm == expected.use_batch_norm;
    if !same_arch {
        return Err(corrupt(format!(
            "{} was built with a different architecture ({got:?})",
            path.display()
        )));
    }
    Ok(ck)
}

fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != SCHEMA_VERSION {
        return Err(corrupt(format!(
            "schema version {version}, this build reads {SCHEMA_VERSION}"
        )));
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let mut offset = 16 + hlen;
    let mut tensors: HashMap<String, (Vec<f32>, Option<bool>)> = HashMap::new();
    for t in &header.tensors {
        let end = offset + t.len * 4;
        let raw = body.get(offset..end).ok_or_else(|| corrupt(format!("truncated tensor {}", t.name)))?;
        let v = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(t.name.clone(), (v, t.trainable));
        offset = end;
    }
    if offset != body.len() {
        return Err(corrupt("trailing bytes after tensors"));
    }
    let mut network = Network::new(&header.model)?;
    let mut adam = header.adam_step.map(|step| AdamState {
        step,
        m: vec![Vec::new(); network.params().len()],
        v: vec![Vec::new(); network.params().len()],
    });
    for (i, p) in network.params_mut().iter_mut().enumerate() {
        let key = p.key();
        let (data, trainable) = tensors
            .remove(&key)
            .ok_or_else(|| corrupt(format!("missing tensor {key}")))?;
        if data.len() != p.data.len() {
            return Err(corrupt(format!(
                "tensor {key} has {} values, model needs {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        if let Some(t) = trainable {
            p.trainable = t;
        }
        if let Some(a) = adam.as_mut() {
            if let (Some((m, _)), Some((v, _))) = (
                tensors.remove(&format!("{ADAM_M}{key}")),
                tensors.remove(&format!("{ADAM_V}{key}")),
            ) {
                a.m[i] = m;
                a.v[i] = v;
            }
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        network,
        epoch: header.epoch,
        optimizer: adam,
        history: header.history,
    })
}
