//! Binary tensor container: magic, version, length-prefixed JSON header,
//! then every tensor as little-endian `f64` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Component, ModelConfig, ParamStore, Seq2Seq};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"SEQLABCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerTensor {
    pub name: String,
    pub tag: String,
    pub value: Matrix,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    tag: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

pub fn write_container(path: &Path, kind: &str, meta: serde_json::Value, tensors: &[ContainerTensor]) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: tensors
            .iter()
            .map(|t| TensorMeta { name: t.name.clone(), tag: t.tag.clone(), rows: t.value.rows, cols: t.value.cols })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let n: usize = tensors.iter().map(|t| t.value.len()).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        for v in &t.value.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(String, serde_json::Value, Vec<ContainerTensor>)> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if buf.len() < 20 || &buf[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let body = buf.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut off = 20 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n = t.rows * t.cols;
        let raw = buf.get(off..off + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        off += 8 * n;
        tensors.push(ContainerTensor { name: t.name, tag: t.tag, value: Matrix::from_vec(t.rows, t.cols, data) });
    }
    if off != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header.kind, header.meta, tensors))
}

/// A model plus the vocabulary hash it was trained against and its step.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Seq2Seq,
    pub vocab_hash: String,
    pub step: u64,
    /// Free-form run metadata (e.g. the noise spec used).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    vocab_hash: String,
    step: u64,
    extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Seq2Seq, vocab_hash: impl Into<String>, step: u64) -> Self {
        Self { model, vocab_hash: vocab_hash.into(), step, extra: serde_json::Value::Null }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.model.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            step: self.step,
            extra: self.extra.clone(),
        };
        let tensors: Vec<ContainerTensor> = self
            .model
            .params
            .iter()
            .map(|(_, t)| ContainerTensor { name: t.name.clone(), tag: t.component.to_string(), value: t.value.clone() })
            .collect();
        write_container(path, "model", serde_json::to_value(meta)?, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, meta, tensors) = read_container(path)?;
        if kind != "model" {
            return Err(Error::Checkpoint(format!("{}: holds `{kind}`, not a model", path.display())));
        }
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        let mut store = ParamStore::new();
        for t in tensors {
            store.insert(&t.name, t.value)?;
            let id = store.require(&t.name)?;
            if Component::parse(&t.tag) != Some(store.get(id).component) {
                return Err(Error::Checkpoint(format!("tensor `{}` tagged `{}`", t.name, t.tag)));
            }
        }
        let model = Seq2Seq::from_params(meta.config, store)?;
        Ok(Self { model, vocab_hash: meta.vocab_hash, step: meta.step, extra: meta.extra })
    }
}
