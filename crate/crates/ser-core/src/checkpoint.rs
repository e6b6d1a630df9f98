//! Parameter checkpoints: a JSON index header followed by a flat blob of
//! 32-bit little-endian floats.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON index (name, shape,
//! element offset, trainable flag per tensor), then the data blob. Values
//! are stored at f32 precision; loading a checkpoint and saving it again
//! reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::optim::ParamSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SERCKPT1";

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

pub fn save(set: &ParamSet, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(set.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, param) in set.iter() {
        entries.push(IndexEntry {
            name: name.clone(),
            shape: param.value.shape().to_vec(),
            offset,
            trainable: param.trainable,
        });
        for &v in param.value.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += param.value.numel();
    }
    let header = serde_json::to_vec(&entries).map_err(|e| Error::MalformedFile {
        path: path.to_path_buf(),
        offset: 0,
        msg: format!("index serialization failed: {e}"),
    })?;
    let mut bytes = Vec::with_capacity(16 + header.len() + blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, msg: String| Error::MalformedFile {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail(0, "missing checkpoint magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16 + header_len;
    if bytes.len() < data_start {
        return Err(fail(8, format!("header length {header_len} exceeds file")));
    }
    let entries: Vec<IndexEntry> = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| fail(16, format!("bad index: {e}")))?;
    let blob = &bytes[data_start..];
    if blob.len() % 4 != 0 {
        return Err(fail(data_start, "data blob is not a whole number of f32s".into()));
    }
    let total = blob.len() / 4;

    let mut set = ParamSet::new();
    for entry in entries {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset.checked_add(numel).filter(|&e| e <= total);
        let Some(end) = end else {
            return Err(fail(
                data_start,
                format!("tensor '{}' extends past the blob", entry.name),
            ));
        };
        let data: Vec<f64> = (entry.offset..end)
            .map(|i| {
                let b = &blob[i * 4..i * 4 + 4];
                f32::from_le_bytes(b.try_into().unwrap()) as f64
            })
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|_| {
            fail(
                16,
                format!("tensor '{}' has invalid shape {:?}", entry.name, entry.shape),
            )
        })?;
        set.insert(&entry.name, tensor)?;
        set.set_trainable(&entry.name, entry.trainable)?;
    }
    Ok(set)
}
