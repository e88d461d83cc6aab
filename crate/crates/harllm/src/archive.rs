//! Single-file tensor archive: 8-byte little-endian header length, UTF-8 JSON
//! header mapping tensor name to dtype/shape/offsets, then raw little-endian
//! payloads. Compatible with the common single-file format for pretrained
//! transformer weights.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Writes tensors in name order. Only F32 payloads are produced.
pub fn save_archive(path: &Path, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let begin = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        header.insert(
            name.clone(),
            HeaderEntry {
                dtype: "F32".into(),
                shape: t.shape().to_vec(),
                data_offsets: [begin, payload.len() as u64],
            },
        );
    }
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(std::fs::write(path, out)?)
}

/// Reads an archive. A `__metadata__` header entry, if present, is ignored.
pub fn load_archive(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::checkpoint("<header>", "file shorter than the length prefix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + n {
        return Err(Error::checkpoint(
            "<header>",
            format!("declared header length {n} exceeds file size {}", bytes.len()),
        ));
    }
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes[8..8 + n])
        .map_err(|e| Error::checkpoint("<header>", format!("malformed header: {e}")))?;
    let payload = &bytes[8 + n..];
    let mut tensors = BTreeMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::checkpoint(&name, format!("malformed entry: {e}")))?;
        if entry.dtype != "F32" {
            return Err(Error::checkpoint(
                &name,
                format!("dtype {} unsupported, expected F32", entry.dtype),
            ));
        }
        let [begin, end] = entry.data_offsets;
        let (begin, end) = (begin as usize, end as usize);
        if begin > end || end > payload.len() {
            return Err(Error::checkpoint(
                &name,
                format!("data offsets [{begin}, {end}) outside payload of {}", payload.len()),
            ));
        }
        let numel: usize = entry.shape.iter().product();
        if end - begin != numel * 4 {
            return Err(Error::checkpoint(
                &name,
                format!(
                    "shape {:?} needs {} bytes but offsets span {}",
                    entry.shape,
                    numel * 4,
                    end - begin
                ),
            ));
        }
        let data: Vec<f32> = payload[begin..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        tensors.insert(name, Tensor::new(entry.shape, data)?);
    }
    Ok(tensors)
}
