//! `EMB1` embedding container.
//!
//! Layout, all integers little-endian: magic `EMB1`, count `u32`, dimension
//! `u32`, then per record identity `u32`, camera `u32`, role `u8`
//! (0 query, 1 gallery) and `dimension` `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{ReidError, Result};
use crate::evaluation::{EvalRecord, Role};

const MAGIC: &[u8; 4] = b"EMB1";

pub fn encode_embeddings(records: &[EvalRecord]) -> std::result::Result<Vec<u8>, String> {
    let dim = records.first().map_or(0, |r| r.embedding.len());
    if let Some((i, r)) = records
        .iter()
        .enumerate()
        .find(|(_, r)| r.embedding.len() != dim)
    {
        return Err(format!(
            "record {i} has dimension {}, expected {dim}",
            r.embedding.len()
        ));
    }
    let mut out = Vec::with_capacity(12 + records.len() * (9 + 4 * dim));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.id.to_le_bytes());
        out.extend_from_slice(&r.cam.to_le_bytes());
        out.push(match r.role {
            Role::Query => 0,
            Role::Gallery => 1,
        });
        for v in &r.embedding {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> std::result::Result<Vec<EvalRecord>, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err("bad magic, expected EMB1".into());
    }
    let count = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let record_len = 9 + 4 * dim;
    let payload = bytes.len() - cur.pos;
    if payload != count * record_len {
        return Err(format!(
            "payload of {payload} bytes does not match {count} records of dimension {dim}"
        ));
    }
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id = cur.u32()?;
        let cam = cur.u32()?;
        let role = match cur.take(1)?[0] {
            0 => Role::Query,
            1 => Role::Gallery,
            other => return Err(format!("unknown role flag {other}")),
        };
        let embedding = (0..dim).map(|_| cur.f32()).collect::<Result<_, _>>()?;
        records.push(EvalRecord {
            id,
            cam,
            role,
            embedding,
        });
    }
    Ok(records)
}

pub fn write_embeddings(records: &[EvalRecord], path: &Path) -> Result<()> {
    let bytes = encode_embeddings(records).map_err(|m| ReidError::format(path, m))?;
    fs::write(path, bytes).map_err(|e| ReidError::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EvalRecord>> {
    let bytes = fs::read(path).map_err(|e| ReidError::io(path, e))?;
    decode_embeddings(&bytes).map_err(|m| ReidError::format(path, m))
}

/// Little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
