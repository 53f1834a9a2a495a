//! Single-file binary checkpoints.
//!
//! Layout: the magic bytes, a little-endian `u64` header length, a JSON
//! header (model config, branches, parameter table), then every parameter's
//! values as little-endian `f64` in table order. Round trips are bitwise.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::LoraBranch;
use crate::model::{param_name, Model, ModelConfig, ModuleId};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HLORACK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BranchEntry {
    #[serde(flatten)]
    module: ModuleId,
    rank: usize,
    enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    requires_grad: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    adapter: Option<(usize, u64)>,
    branches: Vec<BranchEntry>,
    params: Vec<ParamEntry>,
}

/// Serialises `model` to bytes.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let branches = model
        .modules()
        .filter_map(|m| {
            m.branch.as_ref().map(|b| BranchEntry {
                module: m.id,
                rank: b.rank,
                enabled: b.enabled,
            })
        })
        .collect();
    let params = model
        .store
        .iter()
        .map(|(_, name, t)| ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            requires_grad: t.requires_grad,
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        adapter: model.adapter_meta,
        branches,
        params,
    })?;
    let mut out = Vec::with_capacity(16 + header.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, t) in model.store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Rebuilds a model from [`to_bytes`] output.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| corrupt("truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&r[..len])?;
    let mut data = &r[len..];

    let mut model = Model::new(header.config.clone())?;
    for b in &header.branches {
        let m = model.module(b.module)?;
        let (d_in, d_out) = (m.d_in, m.d_out);
        let ids = ["lora.a", "lora.e", "lora.b", "lora.alpha"].map(|leaf| {
            let shape = match leaf {
                "lora.a" => vec![d_in, b.rank],
                "lora.e" => vec![b.rank],
                "lora.b" => vec![b.rank, d_out],
                _ => vec![],
            };
            let numel = shape.iter().product();
            model
                .store
                .insert(param_name(b.module, leaf), Tensor::new(shape, vec![0.0; numel]).expect("shape"))
        });
        model.module_mut(b.module)?.branch = Some(LoraBranch {
            a: ids[0],
            e: ids[1],
            b: ids[2],
            alpha: ids[3],
            enabled: b.enabled,
            rank: b.rank,
        });
    }
    model.adapter_meta = header.adapter;

    if header.params.len() != model.store.len() {
        return Err(corrupt(format!(
            "parameter table has {} entries, model expects {}",
            header.params.len(),
            model.store.len()
        )));
    }
    for p in &header.params {
        let id = model
            .store
            .find(&p.name)
            .ok_or_else(|| corrupt(format!("unexpected parameter `{}`", p.name)))?;
        let t = model.store.get_mut(id);
        if t.shape() != p.shape.as_slice() {
            return Err(corrupt(format!(
                "parameter `{}` has shape {:?}, model expects {:?}",
                p.name,
                p.shape,
                t.shape()
            )));
        }
        let n = t.numel() * 8;
        if data.len() < n {
            return Err(corrupt(format!("truncated data for `{}`", p.name)));
        }
        for (dst, chunk) in t.data_mut().iter_mut().zip(data[..n].chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        t.requires_grad = p.requires_grad;
        data = &data[n..];
    }
    if !data.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", data.len())));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
