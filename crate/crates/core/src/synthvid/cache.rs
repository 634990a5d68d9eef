//! Flat binary clip cache.
//!
//! Layout (little-endian): `"DEARCLIP"`, version `u32`, `T`, `H`, `W`,
//! label as `u32`, seed `u64`, then `T·H·W·3` frame floats and `T·H·W`
//! depth floats, both `f32` row-major.

use std::io::{Read, Write};

use super::VideoClip;
use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 8] = b"DEARCLIP";
pub const CLIP_VERSION: u32 = 1;

pub fn write_clip<W: Write>(clip: &VideoClip, mut out: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(36 + 4 * (clip.frames.len() + clip.depth.len()));
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for v in [clip.num_frames, clip.height, clip.width, clip.label] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&clip.seed.to_le_bytes());
    for v in clip.frames.iter().chain(&clip.depth) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_clip<R: Read>(mut input: R) -> Result<VideoClip> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("reading clip: {e}")))?;
    let header = 8 + 4 * 5 + 8;
    if bytes.len() < header || &bytes[..8] != CLIP_MAGIC {
        return Err(Error::Format("not a clip file (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != CLIP_VERSION {
        return Err(Error::Format(format!("unsupported clip version {version}")));
    }
    let (t, h, w, label) = (
        u32_at(12) as usize,
        u32_at(16) as usize,
        u32_at(20) as usize,
        u32_at(24) as usize,
    );
    let seed = u64::from_le_bytes(bytes[28..36].try_into().expect("8 bytes"));
    let n = t * h * w;
    if bytes.len() != header + 4 * n * 4 {
        return Err(Error::Format(format!(
            "clip payload has {} bytes, expected {}",
            bytes.len() - header,
            16 * n
        )));
    }
    let floats: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (frames, depth) = floats.split_at(3 * n);
    Ok(VideoClip {
        num_frames: t,
        height: h,
        width: w,
        frames: frames.to_vec(),
        depth: depth.to_vec(),
        label,
        seed,
    })
}
