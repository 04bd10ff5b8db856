//! Versioned model checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `SFCNN\0\0\0`, version `u32`, descriptor length `u32`, descriptor
//! JSON, tensor count `u32`, then per tensor its element count `u64` and
//! `f32` values, and finally an FNV-1a 64 checksum of everything before it.
//! Tensors are stored in declaration order, batch-norm running statistics
//! included.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hash::fnv1a64;

use super::model::{ArchDescriptor, CnnModel};

const MAGIC: &[u8; 8] = b"SFCNN\0\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_model(model: &CnnModel<f32>) -> Vec<u8> {
    let desc = serde_json::to_vec(&model.arch).expect("descriptor serializes");
    let tensors = model.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(&desc);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (_, t) in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<CnnModel<f32>> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("not a model checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Corrupt(format!(
            "checksum mismatch (stored {stored:#018x}, computed {computed:#018x})"
        )));
    }
    let desc_len = r.u32()? as usize;
    let arch: ArchDescriptor = serde_json::from_slice(r.take(desc_len)?)
        .map_err(|e| Error::Corrupt(format!("architecture descriptor: {e}")))?;
    let mut model = CnnModel::<f32>::build(arch, 0).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut tensors = model.tensors_mut();
    if count != tensors.len() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint holds {count} tensors, architecture has {}",
            tensors.len()
        )));
    }
    for (i, (_, t)) in tensors.iter_mut().enumerate() {
        let len = r.u64()? as usize;
        if len != t.len() {
            return Err(Error::ShapeMismatch(format!("tensor {i} has {len} values, expected {}", t.len())));
        }
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?)?;
        for (dst, chunk) in t.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after the last tensor".into()));
    }
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &CnnModel<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CnnModel<f32>> {
    let path = path.as_ref();
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint that must match `expected`.
pub fn load_model_for(path: impl AsRef<Path>, expected: &ArchDescriptor) -> Result<CnnModel<f32>> {
    let model = load_model(path)?;
    if &model.arch != expected {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint architecture {:?} differs from the expected {:?}",
            model.arch, expected
        )));
    }
    Ok(model)
}
