//! Bucket frames: `[key_len u32][key][payload_len u32][payload][crc32 u32]`,
//! all integers little-endian, CRC-32 (IEEE) over the payload bytes only.

use std::io::{Read, Write};

use crate::throttle::{TokenBucket, CHUNK_BYTES};
use crate::{Result, TransferError};

/// Bytes a frame adds on top of key and payload.
pub const FRAME_OVERHEAD: usize = 12;

pub fn encode_frame(key: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + key.len() + payload.len());
    write_frame(&mut out, key, payload, None).expect("writing to a Vec");
    out
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| TransferError::Wire(format!("length {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| TransferError::Wire("key is not UTF-8".into()))
}

/// Writes one frame; payload bytes pass through `throttle` in chunks.
pub fn write_frame<W: Write>(w: &mut W, key: &str, payload: &[u8], throttle: Option<&mut TokenBucket>) -> Result<()> {
    write_frame_with_crc(w, key, payload, crc32fast::hash(payload), throttle)
}

/// As [`write_frame`] with a CRC the caller already holds for `payload`.
pub(crate) fn write_frame_with_crc<W: Write>(
    w: &mut W,
    key: &str,
    payload: &[u8],
    crc: u32,
    mut throttle: Option<&mut TokenBucket>,
) -> Result<()> {
    write_str(w, key)?;
    write_u32(w, payload.len())?;
    for chunk in payload.chunks(CHUNK_BYTES) {
        if let Some(tb) = throttle.as_deref_mut() {
            tb.take(chunk.len());
        }
        w.write_all(chunk)?;
    }
    w.write_all(&crc.to_le_bytes())?;
    Ok(())
}

/// Reads one frame and checks its CRC.
pub fn read_frame<R: Read>(r: &mut R, throttle: Option<&mut TokenBucket>) -> Result<(String, Vec<u8>)> {
    read_frame_crc(r, throttle).map(|(k, p, _)| (k, p))
}

/// As [`read_frame`], also returning the verified CRC.
pub(crate) fn read_frame_crc<R: Read>(r: &mut R, mut throttle: Option<&mut TokenBucket>) -> Result<(String, Vec<u8>, u32)> {
    let key = read_str(r)?;
    let n = read_u32(r)? as usize;
    let mut payload = vec![0u8; n];
    for chunk in payload.chunks_mut(CHUNK_BYTES) {
        if let Some(tb) = throttle.as_deref_mut() {
            tb.take(chunk.len());
        }
        r.read_exact(chunk)?;
    }
    let crc = read_u32(r)?;
    if crc != crc32fast::hash(&payload) {
        return Err(TransferError::Integrity { key });
    }
    Ok((key, payload, crc))
}

/// Splits `len` payload bytes into buckets of at most `bucket_bytes`,
/// cutting only on `entry_bytes` boundaries. An empty payload still gets
/// one (empty) bucket so the shard is visible to pullers.
pub fn bucket_ranges(len: usize, bucket_bytes: usize, entry_bytes: usize) -> Vec<(usize, usize)> {
    let step = (bucket_bytes / entry_bytes).max(1) * entry_bytes;
    if len == 0 {
        return vec![(0, 0)];
    }
    (0..len).step_by(step).map(|s| (s, (s + step).min(len))).collect()
}
