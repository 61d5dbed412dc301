//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "SEGCLRCK" | u32 version | u32 len | arch JSON
//! u32 tensor count, then per tensor:
//!   u32 len | name | u8 dtype (0 = f32, 1 = f64) | u32 ndim | u64 dims.. | values
//! ```
//!
//! Head and predictor presence is inferred from the tensor names.

use std::collections::HashMap;
use std::path::Path;

use super::{build_model_with, ArchitectureSpec, Components, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGCLRCK";
const VERSION: u32 = 1;

fn dtype_tag(dtype: &str) -> u8 {
    match dtype {
        "f32" => 0,
        _ => 1,
    }
}

pub fn encode_checkpoint<R: Real>(state: &ModelState<R>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let arch = serde_json::to_vec(&state.arch).expect("arch serializes");
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    let params = state.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(dtype_tag(R::DTYPE));
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for d in &p.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &p.value {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_values<R: Real>(raw: &[u8], tag: u8) -> Vec<R> {
    match tag {
        0 => raw.chunks_exact(4).map(|c| R::of(f32::read_le(c) as f64)).collect(),
        _ => raw.chunks_exact(8).map(|c| R::of(f64::read_le(c))).collect(),
    }
}

/// `origin` only labels errors.
pub fn decode_checkpoint<R: Real>(bytes: &[u8], origin: &Path) -> Result<ModelState<R>> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(origin, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let arch: ArchitectureSpec = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format(origin, format!("architecture manifest: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, u8, &[u8])> = HashMap::with_capacity(count);
    for _ in 0..count {
        let nl = r.u32()? as usize;
        let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| Error::format(origin, "tensor name is not UTF-8"))?;
        let tag = r.take(1)?[0];
        let width = match tag {
            0 => 4,
            1 => 8,
            t => return Err(Error::format(origin, format!("tensor `{name}`: unknown dtype tag {t}"))),
        };
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width)?;
        if tensors.insert(name.clone(), (shape, tag, raw)).is_some() {
            return Err(Error::format(origin, format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(origin, "trailing bytes after last tensor"));
    }
    let parts = Components {
        head: tensors.keys().any(|k| k.starts_with("head.")),
        predictor: tensors.keys().any(|k| k.starts_with("pred.")),
    };
    let mut state: ModelState<R> = build_model_with(&arch, 0, parts)
        .map_err(|e| Error::format(origin, format!("architecture manifest: {e}")))?;
    let mut failure = None;
    let mut used = 0;
    state.visit_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        match tensors.get(&p.name) {
            Some((shape, tag, raw)) if *shape == p.shape => {
                p.value = read_values(raw, *tag);
                used += 1;
            }
            Some((shape, _, _)) => {
                failure = Some(format!("tensor `{}`: shape {:?}, expected {:?}", p.name, shape, p.shape));
            }
            None => failure = Some(format!("missing tensor `{}`", p.name)),
        }
    });
    if let Some(msg) = failure {
        return Err(Error::format(origin, msg));
    }
    if used != tensors.len() {
        return Err(Error::format(origin, "checkpoint holds tensors the architecture does not use"));
    }
    Ok(state)
}

pub fn save_checkpoint<R: Real>(state: &ModelState<R>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<ModelState<R>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
