//! File formats.
//!
//! Embedding stores use a flat binary layout:
//!
//! ```text
//! {"count":N,"dim":D,"dtype":"f32le"}\n
//! N*D little-endian f32 values, row-major
//! N ids, each terminated by \n
//! ```
//!
//! Everything else is JSON or newline-delimited JSON.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, EmbeddingStore};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    count: usize,
    dim: usize,
    dtype: String,
}

const DTYPE: &str = "f32le";

pub fn encode_store(store: &EmbeddingStore) -> Vec<u8> {
    let header = Header {
        count: store.len(),
        dim: store.dim(),
        dtype: DTYPE.to_string(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(store.len() * store.dim() * 4);
    for row in store.rows() {
        for &v in row.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for id in store.ids() {
        out.extend_from_slice(id.as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn decode_store(bytes: &[u8], path: &Path) -> Result<EmbeddingStore> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(bad(format!("unsupported dtype `{}`", header.dtype)));
    }
    let body_len = header
        .count
        .checked_mul(header.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("header size overflow".into()))?;
    let body = bytes
        .get(nl + 1..nl + 1 + body_len)
        .ok_or_else(|| bad("truncated value block".into()))?;
    let tail = std::str::from_utf8(&bytes[nl + 1 + body_len..])
        .map_err(|e| bad(format!("ids are not utf-8: {e}")))?;
    let mut ids: Vec<String> = tail.split('\n').map(str::to_string).collect();
    if ids.last().is_some_and(String::is_empty) {
        ids.pop();
    }
    if ids.len() != header.count {
        return Err(bad(format!(
            "expected {} ids, found {}",
            header.count,
            ids.len()
        )));
    }
    let mut store = EmbeddingStore::new(header.dim);
    for (id, chunk) in ids.into_iter().zip(body.chunks_exact(header.dim.max(1) * 4)) {
        let values = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let row = Embedding::new(values).map_err(|e| bad(format!("row `{id}`: {e}")))?;
        store.push(id, row).map_err(|e| bad(e.to_string()))?;
    }
    Ok(store)
}

pub fn write_store(path: impl AsRef<Path>, store: &EmbeddingStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_store(store)).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes, path)
}

/// Parses every non-blank line of a JSONL file, failing on the first bad line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
