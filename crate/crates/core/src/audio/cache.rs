//! Segment cache format.
//!
//! ```text
//! "TFTF" | version u16 | n_segments u32
//! n_segments x { id_len u16 | utterance id utf-8 | segment_index u32 | label u16
//!                | f u16 | d u16 | f*d f32, band-major }
//! ```
//!
//! Little-endian throughout.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::checkpoint::Reader;

use super::LogMelSegment;

pub const CACHE_MAGIC: &[u8; 4] = b"TFTF";
pub const CACHE_VERSION: u16 = 1;

pub(crate) fn encode(segments: &[LogMelSegment]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(segments.len() as u32).to_le_bytes());
    for s in segments {
        let id = s.utterance_id.as_bytes();
        let f = u16::try_from(s.n_bands).map_err(|_| Error::Input("too many bands".into()))?;
        let d = u16::try_from(s.n_frames).map_err(|_| Error::Input("too many frames".into()))?;
        let id_len = u16::try_from(id.len()).map_err(|_| Error::Input("utterance id too long".into()))?;
        if s.values.len() != s.n_bands * s.n_frames {
            return Err(Error::Shape(format!(
                "segment {}#{} has {} values for {}x{}",
                s.utterance_id,
                s.segment_index,
                s.values.len(),
                f,
                d
            )));
        }
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&s.segment_index.to_le_bytes());
        out.extend_from_slice(&s.label.to_le_bytes());
        out.extend_from_slice(&f.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        for v in &s.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Vec<LogMelSegment>> {
    let mut r = Reader::new(bytes, "feature cache");
    if r.take(4)? != CACHE_MAGIC {
        return Err(Error::format("feature cache", "bad magic"));
    }
    let version = r.u16()?;
    if version != CACHE_VERSION {
        return Err(Error::format("feature cache", format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let mut segments = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id_len = r.u16()? as usize;
        let utterance_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::format("feature cache", "utterance id is not utf-8"))?;
        let segment_index = r.u32()?;
        let label = r.u16()?;
        let f = r.u16()? as usize;
        let d = r.u16()? as usize;
        if f == 0 || d == 0 {
            return Err(Error::format("feature cache", format!("zero dimension {f}x{d}")));
        }
        let values = r.f32s(f * d)?;
        segments.push(LogMelSegment {
            values,
            n_bands: f,
            n_frames: d,
            utterance_id,
            segment_index,
            label,
        });
    }
    if !r.is_empty() {
        return Err(Error::format("feature cache", "trailing bytes"));
    }
    Ok(segments)
}

pub fn write_feature_cache(segments: &[LogMelSegment], path: &Path) -> Result<()> {
    let bytes = encode(segments)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path) -> Result<Vec<LogMelSegment>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
