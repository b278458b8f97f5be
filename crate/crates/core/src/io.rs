//! `CPPM` named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CPPM" | version: u16 | record* | crc32(record*): u32
//! record = name_len: u32 | name: utf-8 | rank: u32 | dims: u64 * rank | values: f64 * Π dims
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"CPPM";
pub const VERSION: u16 = 1;

/// Serializes named tensors in the given order.
pub fn encode(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, t) in tensors {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        body.extend_from_slice(&t.value_bytes());
    }
    let mut out = Vec::with_capacity(body.len() + 10);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption("record runs past end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a container, verifying magic, version and checksum.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing CPPM magic".into()));
    }
    if bytes.len() < 10 {
        return Err(Error::Corruption("file truncated".into()));
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
        return Err(Error::Corruption("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let mut out = Vec::new();
    while r.pos < body.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Corruption("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Corruption(format!(
                "implausible rank {rank} for {name}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Corruption(format!("tensor {name} is too large")))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

/// Moves tensors out of a decoded list by name.
pub(crate) struct NamedTensors(Vec<(String, Option<Tensor>)>);

impl NamedTensors {
    pub fn new(list: Vec<(String, Tensor)>) -> Self {
        Self(list.into_iter().map(|(n, t)| (n, Some(t))).collect())
    }

    /// Takes the named tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let slot = self
            .0
            .iter_mut()
            .find(|(n, _)| n == name)
            .and_then(|(_, t)| t.take())
            .ok_or_else(|| Error::Data(format!("missing tensor `{name}`")))?;
        if slot.shape() != shape {
            return Err(Error::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: slot.shape().to_vec(),
            });
        }
        Ok(slot)
    }

    pub fn take_any(&mut self, name: &str) -> Option<Tensor> {
        self.0
            .iter_mut()
            .find(|(n, _)| n == name)
            .and_then(|(_, t)| t.take())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0
            .iter()
            .filter(|(_, t)| t.is_some())
            .map(|(n, _)| n.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            (
                "a".into(),
                Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap(),
            ),
            ("b/c".into(), Tensor::scalar(std::f64::consts::PI)),
            ("empty".into(), Tensor::zeros(vec![0, 4])),
        ]
    }

    fn refs(list: &[(String, Tensor)]) -> Vec<(String, &Tensor)> {
        list.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let list = sample();
        let bytes = encode(&refs(&list));
        assert_eq!(decode(&bytes).unwrap(), list);
    }

    #[test]
    fn truncation_and_flips_are_detected() {
        let bytes = encode(&refs(&sample()));
        for cut in [6, 11, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Corruption(_))));
        }
        let mut flipped = bytes.clone();
        flipped[12] ^= 0x40;
        assert!(matches!(decode(&flipped), Err(Error::Corruption(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&refs(&sample()));
        bytes[4] = 9;
        assert!(matches!(
            decode(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(
            vals in proptest::collection::vec(proptest::num::f64::ANY, 0..40),
            name in "[a-z/0-9]{1,12}",
        ) {
            let t = Tensor::new(vec![vals.len()], vals).unwrap();
            let bytes = encode(&[(name.clone(), &t)]);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(back[0].1.value_bytes(), t.value_bytes());
        }
    }
}
