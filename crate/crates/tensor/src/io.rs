//! Binary tensor bundles.
//!
//! Layout (little-endian): magic `SPTB`, format version `u32`, tensor count
//! `u32`, then per tensor a `u32` name length, UTF-8 name, `u32` rank, `u64`
//! dims, and raw `f64` data; finally a 32-byte SHA-256 of everything before it.
//! Values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Result, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"SPTB";
const VERSION: u32 = 1;

pub fn encode(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TensorError::Corrupt("unexpected end of tensor bundle".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(TensorError::Corrupt("tensor bundle too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(TensorError::Corrupt("tensor bundle checksum mismatch (truncated or modified file)".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(TensorError::Corrupt("not a tensor bundle (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TensorError::Corrupt(format!("unsupported tensor bundle version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| TensorError::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| TensorError::Corrupt("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != body.len() {
        return Err(TensorError::Corrupt("trailing bytes in tensor bundle".into()));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(proptest::num::f64::ANY, 1..40)) {
            let t = Tensor::from_vec(&[vals.len()], vals).unwrap();
            let back = decode(&encode(&[("w", &t)])).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].1.checksum(), t.checksum());
        }
    }

    #[test]
    fn truncation_is_detected() {
        let t = Tensor::ones(&[2, 3]);
        let bytes = encode(&[("a", &t), ("b", &t)]);
        for cut in [0, 5, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(TensorError::Corrupt(_))));
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(decode(&flipped).is_err());
    }
}
