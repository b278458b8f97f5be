//! `DILD` dataset container.
//!
//! ```text
//! "DILD" | version: u16 | H W C U N domain_id: u32 | split: u8
//!        | labels: u16 * N | pixels: f32 * N*H*W*C | crc32(after version): u32
//! ```

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DILD";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 6 * 4 + 1;

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut body = Vec::with_capacity(HEADER + d.len() * 2 + d.images.len() * 4);
    for v in [d.height, d.width, d.channels, d.num_classes, d.len()] {
        body.extend_from_slice(&(v as u32).to_le_bytes());
    }
    body.extend_from_slice(&d.domain_id.to_le_bytes());
    body.push(d.split.tag());
    for &l in &d.labels {
        body.extend_from_slice(&(l as u16).to_le_bytes());
    }
    for &p in &d.images {
        body.extend_from_slice(&p.to_le_bytes());
    }
    let mut out = Vec::with_capacity(body.len() + 10);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing DILD magic".into()));
    }
    if bytes.len() < HEADER + 4 {
        return Err(Error::Corruption("dataset file truncated".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let body = &bytes[6..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Corruption("dataset checksum mismatch".into()));
    }
    let word = |i: usize| u32::from_le_bytes(body[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (h, w, c, u, n) = (word(0), word(1), word(2), word(3), word(4));
    let domain_id = word(5) as u32;
    let split = Split::from_tag(body[24])?;
    let pixels = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Corruption("implausible dataset dimensions".into()))?;
    let rest = &body[25..];
    if rest.len() != n * 2 + pixels * 4 {
        return Err(Error::Corruption(format!(
            "payload is {} bytes, header implies {}",
            rest.len(),
            n * 2 + pixels * 4
        )));
    }
    let (lab, img) = rest.split_at(n * 2);
    let d = Dataset {
        height: h,
        width: w,
        channels: c,
        num_classes: u,
        domain_id,
        split,
        labels: lab
            .chunks_exact(2)
            .map(|b| usize::from(u16::from_le_bytes([b[0], b[1]])))
            .collect(),
        images: img
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    d.validate()?;
    Ok(d)
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
