//! Binary parameter checkpoints.
//!
//! Layout, little-endian: magic `STCK`, `u32` version, `u32` parameter
//! count, then per parameter `u32` name length, UTF-8 name, `u32` rank,
//! `u32` extents and the `f64` values in row-major order.

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"STCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.numel() * 8);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n) as u64,
            found: self.bytes.len() as u64,
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            found: magic.try_into().expect("4 bytes"),
            expected: CHECKPOINT_MAGIC,
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::InvalidConfig("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let extents = (0..rank)
            .map(|_| Ok(r.u32()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let bytes_needed = extents
            .iter()
            .try_fold(8usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::ExtentOverflow {
                extents: extents.iter().map(|&e| e as u64).collect(),
            })?;
        let data = r
            .take(bytes_needed)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.find(&name).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        store.insert(name, Tensor::new(&extents, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingBytes((bytes.len() - r.pos) as u64));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
