//! Parameter files: `TFCKPT01`, a little-endian u64 header length, a JSON
//! header, then every parameter as raw little-endian f64 in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"TFCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub config: Value,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub meta: Value,
}

pub fn to_bytes(kind: &str, config: Value, meta: Value, store: &ParamStore) -> Result<Vec<u8>> {
    let mut offset = 0;
    let params = store
        .names()
        .iter()
        .zip(store.tensors())
        .map(|(name, t)| {
            let e = ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        params,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, kind: &str, config: Value, meta: Value, store: &ParamStore) -> Result<()> {
    let bytes = to_bytes(kind, config, meta, store)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn from_bytes(bytes: &[u8], kind: &str, path: &Path) -> Result<(Header, ParamStore)> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| fail(format!("header length {hlen} exceeds file size")))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| fail(format!("corrupt header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fail(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.kind != kind {
        return Err(fail(format!(
            "checkpoint holds a {:?}, expected a {kind:?}",
            header.kind
        )));
    }
    let blob = &bytes[16 + hlen..];
    let mut store = ParamStore::new();
    let mut expected = 0;
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(fail(format!(
                "parameter {} at offset {}, expected {expected}",
                e.name, e.offset
            )));
        }
        let raw = blob
            .get(e.offset * 8..(e.offset + n) * 8)
            .ok_or_else(|| fail(format!("blob truncated inside parameter {}", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        expected += n;
    }
    if blob.len() != expected * 8 {
        return Err(fail(format!(
            "blob has {} bytes, manifest declares {}",
            blob.len(),
            expected * 8
        )));
    }
    Ok((header, store))
}

pub fn load(path: &Path, kind: &str) -> Result<(Header, ParamStore)> {
    from_bytes(&std::fs::read(path)?, kind, path)
}

/// Check that a loaded store has exactly the names and shapes of `expected`.
pub fn check_layout(path: &Path, loaded: &ParamStore, expected: &ParamStore) -> Result<()> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if loaded.len() != expected.len() {
        return Err(fail(format!(
            "{} parameters, expected {}",
            loaded.len(),
            expected.len()
        )));
    }
    for i in 0..loaded.len() {
        let (a, b) = (&loaded.names()[i], &expected.names()[i]);
        if a != b || loaded.get(i).shape() != expected.get(i).shape() {
            return Err(fail(format!(
                "parameter {i} is {a} {:?}, expected {b} {:?}",
                loaded.get(i).shape(),
                expected.get(i).shape()
            )));
        }
    }
    Ok(())
}
