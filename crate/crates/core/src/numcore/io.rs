//! `TNSR` binary records: magic `TNSR`, `u32` rank, `u32` dims, `f32` payload,
//! all little-endian. Values are narrowed to `f32` on write and widened back
//! to `f64` on read.

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data().iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record. A bad magic is reported as [`LabError::Invalid`].
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(LabError::invalid(format!(
            "bad TNSR magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(LabError::invalid(format!("implausible TNSR rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(data, &shape)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut &bytes[..])
}

pub fn save_file(path: &std::path::Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| LabError::file(path, e.to_string()))
}

pub fn load_file(path: &std::path::Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| LabError::file(path, e.to_string()))?;
    decode(&bytes).map_err(|e| LabError::file(path, e.to_string()))
}

/// Position of one named record inside a concatenated TNSR bundle.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RecordEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

/// Writes the tensors back to back and returns where each one starts.
pub fn write_bundle(path: &std::path::Path, tensors: &[(String, Tensor)]) -> Result<Vec<RecordEntry>> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(RecordEntry {
            name: name.clone(),
            offset: bytes.len() as u64,
            shape: t.shape().to_vec(),
        });
        bytes.extend_from_slice(&encode(t));
    }
    std::fs::write(path, bytes).map_err(|e| LabError::file(path, e.to_string()))?;
    Ok(entries)
}

/// Reads every record listed in `entries` from a bundle written by [`write_bundle`].
pub fn read_bundle(path: &std::path::Path, entries: &[RecordEntry]) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| LabError::file(path, e.to_string()))?;
    entries
        .iter()
        .map(|e| {
            let start = usize::try_from(e.offset)
                .ok()
                .filter(|&o| o < bytes.len())
                .ok_or_else(|| LabError::file(path, format!("record `{}` offset out of range", e.name)))?;
            let t = decode(&bytes[start..])
                .map_err(|err| LabError::file(path, format!("record `{}`: {err}", e.name)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(LabError::file(
                    path,
                    format!("record `{}` has shape {:?}, manifest says {:?}", e.name, t.shape(), e.shape),
                ));
            }
            Ok((e.name.clone(), t))
        })
        .collect()
}
