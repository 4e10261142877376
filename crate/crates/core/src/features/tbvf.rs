//! TBVF feature files: little-endian `"TBVF"`, `u32` version (1), `u32` T,
//! `u32` D (19), then `T·D` f32 values, frame-major.

use std::io::{Read, Write};
use std::path::Path;

use super::{VocoderFeatures, FEATURE_DIM};
use crate::error::{Error, Result};

pub const TBVF_MAGIC: &[u8; 4] = b"TBVF";
pub const TBVF_VERSION: u32 = 1;

pub fn write_tbvf<W: Write>(features: &VocoderFeatures, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + features.as_slice().len() * 4);
    buf.extend_from_slice(TBVF_MAGIC);
    buf.extend_from_slice(&TBVF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.frame_count() as u32).to_le_bytes());
    buf.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    for v in features.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tbvf<R: Read>(mut r: R) -> Result<VocoderFeatures> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != TBVF_MAGIC {
        return Err(Error::Format("not a TBVF feature file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (version, frames, dim) = (word(4), word(8) as usize, word(12) as usize);
    if version != TBVF_VERSION {
        return Err(Error::Format(format!("unsupported TBVF version {version}")));
    }
    if dim != FEATURE_DIM {
        return Err(Error::Format(format!("TBVF dimension {dim}, expected {FEATURE_DIM}")));
    }
    let expected = 16 + frames * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "TBVF payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VocoderFeatures::from_frames(data)
}

pub fn write_tbvf_file(features: &VocoderFeatures, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_tbvf(features, &mut buf)?;
    crate::fsutil::write_atomic(path.as_ref(), &buf)
}

pub fn read_tbvf_file(path: impl AsRef<Path>) -> Result<VocoderFeatures> {
    read_tbvf(std::fs::File::open(path)?)
}
