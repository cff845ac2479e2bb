//! Binary clip files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "STFB" | version = 1 | label | L | P² | D | L·P²·D × f32 (frame, patch, channel)
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on load.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::{ClipRecord, FeatureClip};

pub const CLIP_MAGIC: [u8; 4] = *b"STFB";
pub const CLIP_VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;

/// Encodes a clip; values are narrowed to `f32`.
pub fn encode_clip(record: &ClipRecord) -> Vec<u8> {
    let f = &record.features;
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 4 * f.values.numel());
    out.extend_from_slice(&CLIP_MAGIC);
    for v in [
        CLIP_VERSION,
        record.label,
        f.frames as u32,
        f.patches as u32,
        f.dim as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in f.values.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes a clip file body; `clip_id` is supplied by the caller.
pub fn decode_clip(bytes: &[u8], clip_id: &str) -> Result<ClipRecord> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != CLIP_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: CLIP_MAGIC,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != CLIP_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CLIP_VERSION,
        });
    }
    let (label, frames, patches, dim) = (word(1), word(2), word(3), word(4));
    let extents = vec![u64::from(frames), u64::from(patches), u64::from(dim)];
    let payload = extents
        .iter()
        .try_fold(4u64, |acc, &e| acc.checked_mul(e))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or(Error::ExtentOverflow {
            extents: extents.clone(),
        })?;
    if payload == 0 {
        return Err(Error::InvalidConfig(format!("clip extents {extents:?} contain a zero")));
    }
    let found = bytes.len() as u64 - HEADER_LEN;
    if found < payload {
        return Err(Error::Truncated {
            expected: payload,
            found,
        });
    }
    if found > payload {
        return Err(Error::TrailingBytes(found - payload));
    }
    let data = bytes[HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let values = Tensor::new(&[frames as usize, patches as usize, dim as usize], data)?;
    Ok(ClipRecord {
        clip_id: clip_id.to_string(),
        label,
        features: FeatureClip::new(values)?,
    })
}

pub fn save_clip(record: &ClipRecord, path: &Path) -> Result<()> {
    fs::write(path, encode_clip(record)).map_err(|e| Error::io(path, e))
}

/// Loads a clip; its id is the file stem.
pub fn load_clip(path: &Path) -> Result<ClipRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_clip(&bytes, &id)
}
