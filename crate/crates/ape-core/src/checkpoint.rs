//! Named-tensor checkpoint format, plus readers for external weight dumps.
//!
//! A checkpoint file is: a little-endian `u64` header length, a JSON
//! header, then the raw parameter payload — every slot's scalars back to
//! back in slot order, little-endian. The header records everything needed
//! to rebuild the model skeleton (configuration, sharing flags, tie groups)
//! and addresses every tensor by name, dtype, shape, byte offset, and decay
//! flag. Loading rebuilds a zeroed skeleton from the header, checks that
//! its names, shapes, and tie topology match the file, and copies the
//! payload in.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, SharingConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bumped whenever the on-disk layout changes.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint stores {found:?} values but this build reads {expected:?}")]
    Dtype { expected: String, found: String },
    #[error("checkpoint is truncated: needs {expected} bytes, has {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint tensor {name:?} has shape {found:?} but the model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint does not match the rebuilt model: {0}")]
    Names(String),
    #[error("checkpoint tie groups do not match the rebuilt model")]
    Ties,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("weight dump record {index} is malformed: {reason}")]
    BadDumpRecord { index: usize, reason: String },
    #[error("name map line {line} is not `external<TAB>canonical`")]
    BadMapLine { line: usize },
    #[error("name map entry {0:?} is missing from the weight dump")]
    MissingExternal(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
    decay: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    model: ModelConfig,
    sharing: SharingConfig,
    tie_groups: Vec<Vec<String>>,
    tensors: Vec<TensorEntry>,
}

/// Serializes the model and its training step to `path`, atomically: the
/// bytes land in a sibling temporary file first and are renamed over the
/// target, so a crash never leaves a half-written checkpoint behind.
pub fn save<S: Scalar>(model: &Model<S>, step: usize, path: &Path) -> Result<(), CheckpointError> {
    let store = model.store();
    let names = store.canonical_names();
    let mut tensors = Vec::with_capacity(store.num_slots());
    let mut offset = 0u64;
    for i in 0..store.num_slots() {
        let t = store.slot(i);
        tensors.push(TensorEntry {
            name: names[i].to_string(),
            dtype: S::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offset,
            decay: store.decays(i),
        });
        offset += (t.numel() * S::BYTES) as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        step: step as u64,
        model: model.cfg().clone(),
        sharing: model.sharing().clone(),
        tie_groups: store.tie_groups(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_json.len() + offset as usize);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for i in 0..store.num_slots() {
        for &x in store.slot(i).data() {
            x.write_le(&mut out);
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuilds a model from `path`, returning it with the step it was saved
/// at. The skeleton implied by the header must agree with the file on every
/// tensor name, dtype, shape, and on the tie topology.
pub fn load<S: Scalar>(path: &Path) -> Result<(Model<S>, usize), CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated {
            expected: 8,
            found: bytes.len(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("eight bytes")) as usize;
    let payload_at = 8 + header_len;
    if bytes.len() < payload_at {
        return Err(CheckpointError::Truncated {
            expected: payload_at,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[8..payload_at])?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(header.format_version));
    }
    let payload = &bytes[payload_at..];

    let mut model = Model::<S>::build_zeroed(header.model.clone(), header.sharing.clone())?;
    if header.tensors.len() != model.store().num_slots() {
        return Err(CheckpointError::Names(format!(
            "file holds {} tensors, model has {} slots",
            header.tensors.len(),
            model.store().num_slots()
        )));
    }
    {
        let store = model.store();
        let names = store.canonical_names();
        for (i, entry) in header.tensors.iter().enumerate() {
            if entry.name != names[i] {
                return Err(CheckpointError::Names(format!(
                    "slot {i} is {:?} in the file but {:?} in the model",
                    entry.name, names[i]
                )));
            }
            if entry.dtype != S::DTYPE {
                return Err(CheckpointError::Dtype {
                    expected: S::DTYPE.to_string(),
                    found: entry.dtype.clone(),
                });
            }
            if entry.shape != store.slot(i).shape() {
                return Err(CheckpointError::Shape {
                    name: entry.name.clone(),
                    expected: store.slot(i).shape().to_vec(),
                    found: entry.shape.clone(),
                });
            }
        }
        if header.tie_groups != store.tie_groups() {
            return Err(CheckpointError::Ties);
        }
    }
    for (i, entry) in header.tensors.iter().enumerate() {
        let numel = model.store().slot(i).numel();
        let start = entry.offset as usize;
        let end = start + numel * S::BYTES;
        if payload.len() < end {
            return Err(CheckpointError::Truncated {
                expected: payload_at + end,
                found: bytes.len(),
            });
        }
        let dst = model.store_mut().slot_mut(i).data_mut();
        for (d, chunk) in dst.iter_mut().zip(payload[start..end].chunks_exact(S::BYTES)) {
            *d = S::read_le(chunk);
        }
        model.store_mut().set_decay(i, entry.decay);
    }
    Ok((model, header.step as usize))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, index: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::BadDumpRecord {
            index,
            reason: format!("truncated while reading {what}"),
        });
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Reads a raw named-tensor dump: repeated records of
/// `[u32 name_len][name][u32 ndim][u64 dims…][f32 data…]`, all
/// little-endian, until the file ends.
pub fn read_weight_dump<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>, CheckpointError> {
    let all = fs::read(path)?;
    let mut bytes = all.as_slice();
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let index = out.len();
        let name_len = u32::from_le_bytes(take(&mut bytes, 4, index, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut bytes, name_len, index, "name")?.to_vec()).map_err(|_| {
            CheckpointError::BadDumpRecord {
                index,
                reason: "name is not UTF-8".into(),
            }
        })?;
        let ndim = u32::from_le_bytes(take(&mut bytes, 4, index, "rank")?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut bytes, 8, index, "dimension")?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut bytes, numel * 4, index, "values")?;
        let data: Vec<S> = raw
            .chunks_exact(4)
            .map(|c| S::of_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::BadDumpRecord {
            index,
            reason: e.to_string(),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

/// Reads `external<TAB>canonical` lines; blank lines are skipped.
pub fn read_name_map(path: &Path) -> Result<Vec<(String, String)>, CheckpointError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((ext, canon)) if !ext.is_empty() && !canon.is_empty() => {
                out.push((ext.to_string(), canon.to_string()));
            }
            _ => return Err(CheckpointError::BadMapLine { line: i + 1 }),
        }
    }
    Ok(out)
}

/// Reads a weight dump plus a name map and returns `(canonical name,
/// tensor)` pairs ready to seed a new model's embeddings and encoder.
pub fn import_pretrained<S: Scalar>(
    dump: &Path,
    map: &Path,
) -> Result<Vec<(String, Tensor<S>)>, CheckpointError> {
    let dumped = read_weight_dump::<S>(dump)?;
    let mapping = read_name_map(map)?;
    let mut out = Vec::with_capacity(mapping.len());
    for (external, canonical) in mapping {
        let found = dumped
            .iter()
            .find(|(name, _)| *name == external)
            .ok_or_else(|| CheckpointError::MissingExternal(external.clone()))?;
        out.push((canonical, found.1.clone()));
    }
    Ok(out)
}
