//! `REID1` model checkpoints.
//!
//! Layout, integers little-endian: magic `REID1`, preset `u8`, `q` `u32`,
//! variant flags `u32`, parameter count `u32`, then per parameter the name
//! length `u32`, UTF-8 name, rank `u32`, extents `u32` each and the `f32` values.

use std::fs;
use std::path::Path;

use reid_autodiff::Tensor;

use crate::data::embeddings::Cursor;
use crate::error::{ReidError, Result};
use crate::network::{build_model, ModelSpec, Preset, ReidModel, VariantFlags};

const MAGIC: &[u8; 5] = b"REID1";

pub fn encode_checkpoint(model: &ReidModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(model.spec.preset.code());
    out.extend_from_slice(&(model.spec.q as u32).to_le_bytes());
    out.extend_from_slice(&model.spec.flags.to_bits().to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Header and named tensors, without building a model.
pub fn decode_raw(bytes: &[u8]) -> std::result::Result<(ModelSpec, Vec<(String, Tensor<f32>)>), String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(5)? != MAGIC {
        return Err("bad magic, expected REID1".into());
    }
    let preset = cur.u8()?;
    let preset = Preset::from_code(preset).ok_or_else(|| format!("unknown preset code {preset}"))?;
    let q = cur.u32()? as usize;
    let bits = cur.u32()?;
    let flags = VariantFlags::from_bits(bits).ok_or_else(|| format!("unknown variant flags {bits:#x}"))?;
    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(format!("{name}: implausible rank {rank}"));
        }
        let shape = (0..rank)
            .map(|_| cur.u32().map(|e| e as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        if n * 4 > bytes.len() - cur.pos {
            return Err(format!("{name}: truncated values"));
        }
        let data = (0..n).map(|_| cur.f32()).collect::<std::result::Result<Vec<_>, _>>()?;
        params.push((name, Tensor::new(&shape, data).map_err(|e| e.to_string())?));
    }
    if !cur.is_done() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    Ok((ModelSpec { preset, q, flags }, params))
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<ReidModel<f32>, String> {
    let (spec, params) = decode_raw(bytes)?;
    let mut model = build_model::<f32>(spec, 0).map_err(|e| e.to_string())?;
    model.params.load(params).map_err(|e| e.to_string())?;
    Ok(model)
}

pub fn save_checkpoint(model: &ReidModel<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| ReidError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ReidModel<f32>> {
    let bytes = fs::read(path).map_err(|e| ReidError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|m| ReidError::format(path, m))
}
