//! SGT1 tensor files: `SGT1`, u8 rank, rank x u32 LE dims, row-major f32 LE payload.

use std::fs;
use std::path::Path;

use signal_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGT1";

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("rank {} does not fit SGT1", t.rank())))?;
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} does not fit SGT1")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses SGT1 bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |offset: usize, msg: String| Error::format(path, offset as u64, msg);
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(err(0, "bad magic, expected SGT1".into()));
    }
    let Some(&rank) = bytes.get(4) else {
        return Err(err(4, "truncated header: missing rank".into()));
    };
    if rank == 0 {
        return Err(err(4, "rank must be at least 1".into()));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut pos = 5;
    let mut count: usize = 1;
    for _ in 0..rank {
        let Some(raw) = bytes.get(pos..pos + 4) else {
            return Err(err(pos, "truncated header: missing dimension".into()));
        };
        let d = u32::from_le_bytes(raw.try_into().expect("four bytes")) as usize;
        if d == 0 {
            return Err(err(pos, "zero-length dimension".into()));
        }
        count = count
            .checked_mul(d)
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| err(pos, "dimension product overflows".into()))?;
        shape.push(d);
        pos += 4;
    }
    let payload = &bytes[pos..];
    if payload.len() < count * 4 {
        return Err(err(
            pos + payload.len(),
            format!("truncated payload: expected {} bytes, found {}", count * 4, payload.len()),
        ));
    }
    if payload.len() > count * 4 {
        return Err(err(pos + count * 4, format!("{} trailing bytes", payload.len() - count * 4)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
        .collect();
    Ok(Tensor::new(&shape, data)?)
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
