//! Config and weights files.
//!
//! Weights layout: the 5-byte magic `HYTS1`, a little-endian `u64` manifest
//! length, the JSON manifest, zero padding to a 64-byte boundary, then the
//! body. Each tensor is stored as little-endian `f32` at a 64-byte-aligned
//! offset relative to the body start, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{build_model, Model, ModelConfig};
use crate::numerics::{Precision, Tensor};

pub const MAGIC: &[u8; 5] = b"HYTS1";
pub const ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("cannot parse config {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Invalid(#[from] crate::Error),
}

pub fn parse_config(text: &str) -> Result<ModelConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

pub fn config_to_toml(cfg: &ModelConfig) -> String {
    toml::to_string(cfg).expect("config fields are plain scalars")
}

/// Reads and validates a config. Missing keys take the tiny-preset values;
/// unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<ModelConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let cfg = parse_config(&text).map_err(|reason| ConfigError::Parse {
        path: path.to_path_buf(),
        reason,
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("weights I/O error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("bad magic: expected HYTS1")]
    BadMagic,
    #[error("truncated weights file: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("shape mismatch for tensor `{name}`: file has {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] crate::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: String,
    /// Bytes from the start of the body.
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

fn align_up(v: usize) -> usize {
    v.div_ceil(ALIGN) * ALIGN
}

pub fn encode_weights(model: &Model) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut body: Vec<u8> = Vec::new();
    for (name, t) in model.named_tensors() {
        body.resize(align_up(body.len()), 0);
        let offset = body.len();
        for &v in t.data() {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            precision: t.precision().name().to_string(),
            offset,
            length: body.len() - offset,
        });
    }
    let manifest = serde_json::to_vec(&Manifest { tensors: entries }).expect("manifest serializes");
    let mut out = Vec::with_capacity(ALIGN + manifest.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.resize(align_up(out.len()), 0);
    out.extend_from_slice(&body);
    out
}

fn take(bytes: &[u8], start: usize, len: usize) -> Result<&[u8], WeightsError> {
    let end = start.checked_add(len).ok_or(WeightsError::Truncated {
        needed: usize::MAX,
        available: bytes.len(),
    })?;
    bytes.get(start..end).ok_or(WeightsError::Truncated {
        needed: end,
        available: bytes.len(),
    })
}

fn parse_precision(name: &str) -> Result<Precision, WeightsError> {
    match name {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        "bf16" => Ok(Precision::Bf16Emu),
        other => Err(WeightsError::Manifest(format!("unknown precision `{other}`"))),
    }
}

/// Parses the header and checks the manifest's internal consistency.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, usize), WeightsError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let len_bytes = take(bytes, MAGIC.len(), 8)?;
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    let header = take(bytes, MAGIC.len() + 8, header_len)?;
    let manifest: Manifest =
        serde_json::from_slice(header).map_err(|e| WeightsError::Manifest(e.to_string()))?;
    let body_start = align_up(MAGIC.len() + 8 + header_len);
    let mut seen = std::collections::HashSet::new();
    let mut next = 0;
    for e in &manifest.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(WeightsError::Manifest(format!("duplicate tensor `{}`", e.name)));
        }
        if e.offset < next || e.offset % ALIGN != 0 {
            return Err(WeightsError::Manifest(format!("tensor `{}` has a bad offset {}", e.name, e.offset)));
        }
        let count: usize = e.shape.iter().product();
        if e.length != count * 4 {
            return Err(WeightsError::Manifest(format!(
                "tensor `{}` spans {} bytes but its shape needs {}",
                e.name,
                e.length,
                count * 4
            )));
        }
        parse_precision(&e.precision)?;
        next = e.offset + e.length;
    }
    let needed = body_start + next;
    if bytes.len() < needed {
        return Err(WeightsError::Truncated { needed, available: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(WeightsError::Manifest(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - needed
        )));
    }
    Ok((manifest, body_start))
}

/// Builds a model for `cfg` and replaces every weight from `bytes`. Nothing is
/// returned unless every tensor is present with the expected shape.
pub fn decode_weights(bytes: &[u8], cfg: &ModelConfig) -> Result<Model, WeightsError> {
    let (manifest, body_start) = decode_manifest(bytes)?;
    let mut model = build_model(cfg)?;
    {
        let mut slots = model.named_tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(WeightsError::Manifest(format!(
                "file has {} tensors, config expects {}",
                manifest.tensors.len(),
                slots.len()
            )));
        }
        for (entry, (name, slot)) in manifest.tensors.iter().zip(slots.iter_mut()) {
            if entry.name != *name {
                return Err(WeightsError::Manifest(format!(
                    "expected tensor `{name}`, found `{}`",
                    entry.name
                )));
            }
            if entry.shape != slot.shape() {
                return Err(WeightsError::ShapeMismatch {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    found: entry.shape.clone(),
                });
            }
        }
        for (entry, (_, slot)) in manifest.tensors.iter().zip(slots.iter_mut()) {
            let raw = take(bytes, body_start + entry.offset, entry.length)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            **slot = Tensor::new(&entry.shape, data, parse_precision(&entry.precision)?)?;
        }
    }
    model.sync_tied_head()?;
    Ok(model)
}

pub fn save_weights(model: &Model, path: &Path) -> Result<(), WeightsError> {
    fs::write(path, encode_weights(model)).map_err(|e| WeightsError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<Model, WeightsError> {
    let bytes = fs::read(path).map_err(|e| WeightsError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_weights(&bytes, cfg)
}
