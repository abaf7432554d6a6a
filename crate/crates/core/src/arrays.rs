//! Named-array container shared by checkpoints and solver dumps.
//!
//! Layout: one line of JSON header terminated by `\n`, then every array in
//! header order as row-major little-endian `f64`. The header's
//! `content_hash` is the SHA-256 of the binary payload in lowercase hex.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARRAY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub format_version: u32,
    pub kind: String,
    pub metadata: serde_json::Value,
    pub arrays: Vec<ArrayMeta>,
    pub content_hash: String,
}

fn payload(arrays: &[(String, &DMatrix<f64>)]) -> Vec<u8> {
    let total: usize = arrays.iter().map(|(_, m)| m.len()).sum();
    let mut out = Vec::with_capacity(total * 8);
    for (_, m) in arrays {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.extend_from_slice(&m[(r, c)].to_le_bytes());
            }
        }
    }
    out
}

pub fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_arrays(
    kind: &str,
    metadata: serde_json::Value,
    arrays: &[(String, &DMatrix<f64>)],
) -> Result<Vec<u8>> {
    let body = payload(arrays);
    let header = ArrayHeader {
        format_version: ARRAY_FORMAT_VERSION,
        kind: kind.to_string(),
        metadata,
        arrays: arrays
            .iter()
            .map(|(n, m)| ArrayMeta {
                name: n.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
        content_hash: hash_hex(&body),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&body);
    Ok(out)
}

/// Arrays in file order, keyed by name.
pub type NamedArrays = Vec<(String, DMatrix<f64>)>;

pub fn decode_arrays(bytes: &[u8]) -> Result<(ArrayHeader, NamedArrays)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header: ArrayHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format_version != ARRAY_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported array format version {}",
            header.format_version
        )));
    }
    let body = &bytes[nl + 1..];
    if hash_hex(body) != header.content_hash {
        return Err(Error::Format("content hash mismatch".into()));
    }
    let expected: usize = header.arrays.iter().map(|a| a.rows * a.cols * 8).sum();
    if expected != body.len() {
        return Err(Error::Format(format!(
            "payload has {} bytes, header describes {expected}",
            body.len()
        )));
    }
    let mut off = 0;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for a in &header.arrays {
        let mut m = DMatrix::zeros(a.rows, a.cols);
        for r in 0..a.rows {
            for c in 0..a.cols {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&body[off..off + 8]);
                m[(r, c)] = f64::from_le_bytes(buf);
                off += 8;
            }
        }
        arrays.push((a.name.clone(), m));
    }
    Ok((header, arrays))
}

pub fn write_arrays(
    path: &Path,
    kind: &str,
    metadata: serde_json::Value,
    arrays: &[(String, &DMatrix<f64>)],
) -> Result<()> {
    let bytes = encode_arrays(kind, metadata, arrays)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_arrays(path: &Path) -> Result<(ArrayHeader, NamedArrays)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_arrays(&bytes)
}
