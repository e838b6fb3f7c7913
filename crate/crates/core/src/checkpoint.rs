//! Flat binary checkpoints of named parameters.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "DPCN" version count
//! count x { name_len name_utf8 n c h w f32_le[n*c*h*w] }
//! crc32(all preceding bytes)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{numel, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"DPCN";
pub const VERSION: u32 = 1;

/// One decoded parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

/// Serializes every parameter of `store` in registration order.
pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        for e in p.value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Malformed(format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a checkpoint, checking magic, CRC and version in that order.
pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Malformed("file too short".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { bytes: payload, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Malformed(format!("entry {i} has a non-UTF-8 name")))?
            .to_string();
        let mut shape = [0usize; 4];
        for e in &mut shape {
            *e = r.u32("shape")? as usize;
        }
        let n = numel(&shape);
        let raw = r.take(n.saturating_mul(4), "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    if r.pos != payload.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the last entry",
            payload.len() - r.pos
        )));
    }
    Ok(entries)
}

/// Copies `entries` into `store` after checking that every model parameter
/// is present with the same shape and nothing extra is supplied. Nothing is
/// written unless the whole checkpoint matches.
pub fn apply<T: Scalar>(store: &mut ParamStore<T>, entries: &[Entry]) -> Result<(), CheckpointError> {
    let by_name: std::collections::HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    for p in store.iter() {
        match by_name.get(p.name.as_str()) {
            Some(e) if e.shape == p.value.shape() => {}
            Some(e) => {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: Some(p.value.shape()),
                    found: format!("{:?}", e.shape),
                })
            }
            None => {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: Some(p.value.shape()),
                    found: "no such entry".into(),
                })
            }
        }
    }
    if let Some(extra) = entries.iter().find(|e| store.id(&e.name).is_none()) {
        return Err(CheckpointError::ShapeMismatch {
            name: extra.name.clone(),
            expected: None,
            found: format!("{:?}", extra.shape),
        });
    }
    if entries.len() != store.len() {
        return Err(CheckpointError::Malformed("duplicate parameter names".into()));
    }
    for e in entries {
        let p = store.by_name_mut(&e.name).expect("validated above");
        p.value =
            Tensor::from_vec(e.shape, e.data.iter().map(|&v| T::of(v as f64)).collect()).expect("validated above");
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(store))?;
    Ok(())
}

/// Reads `path` and loads it into `store` (all-or-nothing).
pub fn load_checkpoint<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let entries = decode(&bytes)?;
    apply(store, &entries)?;
    Ok(())
}
