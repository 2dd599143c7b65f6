//! Checkpoint container.
//!
//! ```text
//! TOKENTUNE-CHECKPOINT 1\n
//! header-bytes <N>\n
//! <N bytes of JSON header>\n
//! <payload: every tensor's values as little-endian f64, header order>
//! ```
//!
//! The header holds the kind (`model` or `adapter`), the model config, the
//! dtype and one `{name, rows, cols, frozen}` record per tensor, plus the
//! adapter configuration when adapters are attached. Values are stored as
//! f64 regardless of dtype, so a round trip is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel};
use crate::adapters::{self, LoraConfig};
use crate::error::{Error, Result};
use crate::matrix::{Dtype, Matrix};

const MAGIC: &str = "TOKENTUNE-CHECKPOINT 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub lora: LoraConfig,
    pub merged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub dtype: Dtype,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub adapters: Option<AdapterMeta>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode(header: &Header, tensors: &[&Matrix]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "header-bytes {}", json.len())?;
    out.extend_from_slice(&json);
    out.push(b'\n');
    for t in tensors {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<Matrix>)> {
    let line = |start: usize| -> Result<(&str, usize)> {
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let s = std::str::from_utf8(&bytes[start..start + end]).map_err(|_| bad("header is not UTF-8"))?;
        Ok((s, start + end + 1))
    };
    let (magic, next) = line(0)?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic line {magic:?}")));
    }
    let (len_line, start) = line(next)?;
    let n: usize = len_line
        .strip_prefix("header-bytes ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad header length line {len_line:?}")))?;
    let end = start.checked_add(n).filter(|&e| e < bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[start..end]).map_err(|e| bad(format!("header: {e}")))?;
    if bytes[end] != b'\n' {
        return Err(bad("missing header terminator"));
    }
    let payload = &bytes[end + 1..];
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if payload.len() != expected {
        return Err(bad(format!("payload has {} bytes, header describes {expected}", payload.len())));
    }
    let mut off = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let len = t.rows * t.cols;
        let data = payload[off..off + 8 * len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        off += 8 * len;
        tensors.push(Matrix::from_vec(t.rows, t.cols, data, header.dtype)?);
    }
    Ok((header, tensors))
}

fn adapter_meta(model: &TransformerModel) -> Option<AdapterMeta> {
    model.adapters.as_ref().map(|a| AdapterMeta {
        lora: a.config.clone(),
        merged: a.merged,
    })
}

/// Writes every parameter of `model`.
pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<()> {
    let header = Header {
        kind: CheckpointKind::Model,
        config: model.config.clone(),
        dtype: model.dtype(),
        tensors: model
            .params
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                frozen: p.frozen,
            })
            .collect(),
        adapters: adapter_meta(model),
    };
    let values: Vec<&Matrix> = model.params.iter().map(|(_, p)| &p.value).collect();
    fs::write(path, encode(&header, &values)?)?;
    Ok(())
}

/// Reads a model checkpoint. When `expect` is given, the stored config must match it.
pub fn load_checkpoint(path: &Path, expect: Option<&ModelConfig>) -> Result<TransformerModel> {
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let (header, tensors) = decode(&bytes)?;
    if header.kind != CheckpointKind::Model {
        return Err(bad("expected a model checkpoint, found an adapter checkpoint"));
    }
    if let Some(c) = expect {
        if *c != header.config {
            return Err(bad("checkpoint model config does not match the run config"));
        }
    }
    let mut model = TransformerModel::zeros(header.config.clone(), header.dtype)?;
    if let Some(meta) = &header.adapters {
        adapters::attach(&mut model, &meta.lora, 0)?;
        model.adapters.as_mut().expect("just attached").merged = meta.merged;
    }
    if model.params.len() != header.tensors.len() {
        return Err(bad(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    for (entry, value) in header.tensors.iter().zip(tensors) {
        fill(&mut model, entry, value)?;
    }
    Ok(model)
}

fn fill(model: &mut TransformerModel, entry: &TensorEntry, value: Matrix) -> Result<()> {
    let id = model
        .params
        .find(&entry.name)
        .ok_or_else(|| bad(format!("unknown tensor {}", entry.name)))?;
    let p = model.params.get_mut(id);
    if p.value.shape() != value.shape() {
        return Err(bad(format!(
            "tensor {} has shape {:?}, model expects {:?}",
            entry.name,
            value.shape(),
            p.value.shape()
        )));
    }
    p.value = value;
    p.frozen = entry.frozen;
    Ok(())
}

/// Writes only the adapter factors and their configuration.
pub fn save_adapters(model: &TransformerModel, path: &Path) -> Result<()> {
    let meta = adapter_meta(model).ok_or_else(|| bad("model has no adapters"))?;
    let ids = adapters::adapter_params(model);
    let header = Header {
        kind: CheckpointKind::Adapter,
        config: model.config.clone(),
        dtype: model.dtype(),
        tensors: ids
            .iter()
            .map(|&id| {
                let p = model.params.get(id);
                TensorEntry {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    frozen: p.frozen,
                }
            })
            .collect(),
        adapters: Some(meta),
    };
    let values: Vec<&Matrix> = ids.iter().map(|&id| model.params.value(id)).collect();
    fs::write(path, encode(&header, &values)?)?;
    Ok(())
}

/// Attaches adapters read from `path` onto a base model with a matching config.
pub fn load_adapters(base: &mut TransformerModel, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let (header, tensors) = decode(&bytes)?;
    if header.kind != CheckpointKind::Adapter {
        return Err(bad("expected an adapter checkpoint"));
    }
    if header.config != base.config {
        return Err(bad("adapter checkpoint was made for a different base model"));
    }
    let meta = header.adapters.clone().ok_or_else(|| bad("adapter metadata missing"))?;
    adapters::attach(base, &meta.lora, 0)?;
    for (entry, value) in header.tensors.iter().zip(tensors) {
        fill(base, entry, value.to_dtype(base.dtype()))?;
    }
    if meta.merged {
        adapters::merge(base)?;
    }
    Ok(())
}
