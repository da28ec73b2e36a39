//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! b"TTTCKPT1"            8 bytes
//! header length          u64, little endian
//! header                 UTF-8 JSON
//! payload                tensors in index order, little endian, packed
//! ```
//!
//! The header repeats the magic and holds the model config, one entry per
//! block (`spec` is absent for Softmax blocks) and the tensor index. Each
//! index entry gives `name`, `shape`, `dtype` (`f32` or `f64`), `offset`
//! relative to the payload start, and `nbytes`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttentionBlockParams, Block, ConvertSpec, ModelConfig, TttBlockParams, VitModel};
use crate::error::{Error, FormatError, Result};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: &str = "TTTCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub heads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ConvertSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub magic: String,
    pub config: ModelConfig,
    pub blocks: Vec<BlockEntry>,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes `model` with every tensor stored as `dtype`.
pub fn encode_checkpoint(model: &VitModel, dtype: DType) -> Result<Vec<u8>> {
    let named = model.named();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, t, _) in &named {
        let nbytes = (t.len() * dtype.size_of()) as u64;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype,
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = Header {
        magic: CHECKPOINT_MAGIC.to_string(),
        config: model.config,
        blocks: model
            .blocks
            .iter()
            .map(|b| BlockEntry {
                heads: b.attention().heads,
                spec: b.spec().copied(),
            })
            .collect(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Unsupported(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t, _) in &named {
        match dtype {
            DType::F32 => t.data().iter().for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
            DType::F64 => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

/// Writes `model` to `path`; returns the file size in bytes.
pub fn write_checkpoint(path: &Path, model: &VitModel, dtype: DType) -> Result<u64> {
    let bytes = encode_checkpoint(model, dtype)?;
    std::fs::write(path, &bytes).map_err(|e| io_err(path, e))?;
    Ok(bytes.len() as u64)
}

fn truncated(offset: u64, needed: u64, available: u64) -> FormatError {
    FormatError::Truncated {
        offset,
        needed,
        available,
    }
}

fn inconsistent(name: &str, reason: impl Into<String>) -> FormatError {
    FormatError::Inconsistent {
        name: name.to_string(),
        reason: reason.into(),
    }
}

/// Parses the framing and tensor payloads without interpreting tensor names.
pub fn decode_tensors(bytes: &[u8]) -> Result<(Header, BTreeMap<String, Tensor>), FormatError> {
    let len = bytes.len() as u64;
    if len < 16 {
        return Err(truncated(0, 16, len));
    }
    let magic = &bytes[..8];
    if magic != CHECKPOINT_MAGIC.as_bytes() {
        return Err(FormatError::MagicMismatch {
            expected: CHECKPOINT_MAGIC.to_string(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if header_len > len - 16 {
        return Err(truncated(16, header_len, len - 16));
    }
    let header_end = 16 + header_len as usize;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| FormatError::Header(e.to_string()))?;
    if header.magic != CHECKPOINT_MAGIC {
        return Err(FormatError::MagicMismatch {
            expected: CHECKPOINT_MAGIC.to_string(),
            found: header.magic.clone(),
        });
    }
    let payload = &bytes[header_end..];
    let available = payload.len() as u64;
    let mut expected_offset = 0u64;
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let count: usize = e.shape.iter().product();
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(inconsistent(&e.name, format!("invalid shape {:?}", e.shape)));
        }
        let want = (count * e.dtype.size_of()) as u64;
        if e.nbytes != want {
            return Err(inconsistent(
                &e.name,
                format!("shape {:?} as {} needs {want} bytes, index says {}", e.shape, e.dtype.name(), e.nbytes),
            ));
        }
        if e.offset != expected_offset {
            return Err(inconsistent(
                &e.name,
                format!("offset {} does not follow the previous tensor (expected {expected_offset})", e.offset),
            ));
        }
        let end = e.offset + e.nbytes;
        if end > available {
            return Err(truncated(header_end as u64 + e.offset, e.nbytes, available.saturating_sub(e.offset)));
        }
        let raw = &payload[e.offset as usize..end as usize];
        let data: Vec<f64> = match e.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let t = Tensor::new(&e.shape, data)
            .map_err(|err| inconsistent(&e.name, err.to_string()))?
            .to_dtype(e.dtype);
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(inconsistent(&e.name, "duplicate tensor name"));
        }
        expected_offset = end;
    }
    if expected_offset != available {
        return Err(inconsistent(
            "<payload>",
            format!("{} trailing bytes after the last tensor", available - expected_offset),
        ));
    }
    Ok((header, tensors))
}

fn assemble(header: &Header, mut map: BTreeMap<String, Tensor>) -> Result<VitModel, FormatError> {
    let cfg = header.config;
    cfg.validate().map_err(|e| FormatError::Header(e.to_string()))?;
    if header.blocks.len() != cfg.depth {
        return Err(FormatError::Header(format!(
            "config depth {} but {} block entries",
            cfg.depth,
            header.blocks.len()
        )));
    }
    let mut need = |name: &str| map.remove(name).ok_or_else(|| inconsistent(name, "missing from checkpoint"));
    let patch_w = need("patch_embed.w")?;
    let patch_b = need("patch_embed.b")?;
    let pos_embed = need("pos_embed")?;
    let norm_scale = need("norm.scale")?;
    let norm_shift = need("norm.shift")?;
    let head_w = need("head.w")?;
    let head_b = need("head.b")?;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for (i, entry) in header.blocks.iter().enumerate() {
        let prefix = format!("blocks.{i}.");
        let attn = AttentionBlockParams::from_named(entry.heads, &mut map, &prefix)
            .map_err(|e| inconsistent(&format!("blocks.{i}"), e.to_string()))?;
        blocks.push(match entry.spec {
            None => Block::Softmax(attn),
            Some(spec) => {
                let shapes = spec
                    .new_tensor_shapes(attn.model_dim(), attn.heads)
                    .map_err(|e| inconsistent(&format!("blocks.{i}"), e.to_string()))?;
                let mut new = BTreeMap::new();
                for (name, shape) in shapes {
                    let full = format!("{prefix}{name}");
                    let t = map.remove(&full).ok_or_else(|| inconsistent(&full, "missing from checkpoint"))?;
                    if t.shape() != shape.as_slice() {
                        return Err(inconsistent(&full, format!("shape {:?}, expected {shape:?}", t.shape())));
                    }
                    new.insert(name, t);
                }
                Block::Converted(TttBlockParams {
                    inherited: attn,
                    spec,
                    new,
                })
            }
        });
    }
    if let Some(name) = map.keys().next() {
        return Err(inconsistent(name, "not part of the model"));
    }
    let model = VitModel {
        config: cfg,
        patch_w,
        patch_b,
        pos_embed,
        blocks,
        norm_scale,
        norm_shift,
        head_w,
        head_b,
    };
    let d = cfg.model_dim;
    let expected: [(&str, &Tensor, Vec<usize>); 7] = [
        ("patch_embed.w", &model.patch_w, vec![cfg.patch_dim(), d]),
        ("patch_embed.b", &model.patch_b, vec![1, d]),
        ("pos_embed", &model.pos_embed, vec![cfg.tokens(), d]),
        ("norm.scale", &model.norm_scale, vec![1, d]),
        ("norm.shift", &model.norm_shift, vec![1, d]),
        ("head.w", &model.head_w, vec![d, cfg.num_classes]),
        ("head.b", &model.head_b, vec![1, cfg.num_classes]),
    ];
    for (name, t, shape) in expected {
        if t.shape() != shape.as_slice() {
            return Err(inconsistent(name, format!("shape {:?}, expected {shape:?}", t.shape())));
        }
    }
    Ok(model)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<VitModel, FormatError> {
    let (header, map) = decode_tensors(bytes)?;
    assemble(&header, map)
}

pub fn read_checkpoint(path: &Path) -> Result<VitModel> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_checkpoint(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a checkpoint's raw tensors, e.g. an externally produced dump.
pub fn read_tensors(path: &Path) -> Result<(Header, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_tensors(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
