//! `PANT` tensor container: magic, `u16` version, `u8` dtype, `u8` rank,
//! `u32` extents, then a row-major `f32` payload. Every integer and float is
//! little-endian.

use crate::autograd::Tensor;

use super::{PersistError, Result};

pub const MAGIC: &[u8; 4] = b"PANT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

/// Rounds `t` to f32 and appends its blob to `out`.
pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    if t.shape().len() > u8::MAX as usize {
        return Err(PersistError::Numeric(format!("rank {} too large", t.shape().len())));
    }
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        let e = u32::try_from(e)
            .map_err(|_| PersistError::Numeric(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.reserve(4 * t.len());
    for &v in t.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(PersistError::Numeric(format!("value {v} is not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_into(t, &mut out)?;
    Ok(out)
}

/// Decodes one blob from the front of `bytes`, returning it and the rest.
/// `path` only labels errors.
pub fn decode_prefix<'a>(bytes: &'a [u8], path: &str) -> Result<(Tensor, &'a [u8])> {
    let bad = |m: String| PersistError::Format {
        path: path.to_string(),
        reason: m,
    };
    if bytes.len() < 8 {
        return Err(bad(format!("{} bytes is shorter than a blob header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("missing PANT magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(PersistError::Version {
            path: path.to_string(),
            found: version as u64,
        });
    }
    if bytes[6] != DTYPE_F32 {
        return Err(bad(format!("unknown dtype code {}", bytes[6])));
    }
    let rank = bytes[7] as usize;
    let head = 8 + 4 * rank;
    if bytes.len() < head {
        return Err(bad("truncated extents".into()));
    }
    let shape: Vec<usize> = bytes[8..head]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| bad("extent product overflows".into()))?;
    let end = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(head))
        .ok_or_else(|| bad("payload size overflows".into()))?;
    if bytes.len() < end {
        return Err(bad(format!(
            "payload holds {} bytes, extents {shape:?} need {}",
            bytes.len() - head,
            end - head
        )));
    }
    let data = bytes[head..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
    Ok((t, &bytes[end..]))
}

/// Decodes a buffer holding exactly one blob.
pub fn decode(bytes: &[u8], path: &str) -> Result<Tensor> {
    let (t, rest) = decode_prefix(bytes, path)?;
    if !rest.is_empty() {
        return Err(PersistError::Format {
            path: path.to_string(),
            reason: format!("{} trailing bytes", rest.len()),
        });
    }
    Ok(t)
}

/// Decodes a buffer of back-to-back blobs.
pub fn decode_all(mut bytes: &[u8], path: &str) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (t, rest) = decode_prefix(bytes, path)?;
        out.push(t);
        bytes = rest;
    }
    Ok(out)
}
