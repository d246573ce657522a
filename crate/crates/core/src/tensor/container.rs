//! `PFTCKPT1` tensor container.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, UTF-8 JSON
//! manifest (`meta` plus name/shape/byte-offset per tensor), then the
//! concatenated little-endian `f64` payloads in manifest order.

use std::io::{Read, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{numel, Tensor};
use crate::error::{PftError, Result};

pub const CONTAINER_MAGIC: &[u8; 8] = b"PFTCKPT1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: IndexMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

pub fn write_container<W: Write>(mut out: W, c: &Container) -> Result<()> {
    let mut offset = 0u64;
    let entries = c
        .tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.len() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        meta: c.meta.clone(),
        tensors: entries,
    })?;
    out.write_all(CONTAINER_MAGIC)?;
    out.write_all(&(manifest.len() as u64).to_le_bytes())?;
    out.write_all(&manifest)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for t in c.tensors.values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut input: R) -> Result<Container> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(PftError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut manifest = vec![0u8; len];
    input.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest)?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let mut tensors = IndexMap::new();
    for e in manifest.tensors {
        let n = numel(&e.shape);
        let start = e.offset as usize;
        let end = start + 8 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| PftError::Checkpoint(format!("payload of '{}' out of bounds", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        tensors.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(Container {
        meta: manifest.meta,
        tensors,
    })
}
