//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian: magic `PDSW`, `u32` version, `u32`
//! tensor count, then per tensor `u32` name length, UTF-8 name, `u32` rank,
//! `rank × u64` dims, and `f64` values.

use std::path::Path;

use dragsaw_core::Tensor;

use crate::error::{self, AppError, Result};

pub const MAGIC: &[u8; 4] = b"PDSW";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} reading {what}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| "file shorter than the 4-byte magic".to_string())?;
    if magic != MAGIC {
        return Err(format!("bad magic: expected {:?}, found {:?}", "PDSW", String::from_utf8_lossy(magic)));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}, expected {VERSION}"));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format!("tensor {i}: name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64("dim")?).map_err(|_| format!("{name}: dimension overflows"))?);
        }
        let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| format!("{name}: size overflows"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| format!("{name}: size overflows"))?, "payload")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name.clone(), Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&error::read(path)?).map_err(|m| AppError::format(path, m))
}

pub fn write(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    error::write(path, &encode(tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.weight".into(), Tensor::new(&[2, 1, 1, 1], vec![1.5, -0.25]).unwrap()),
            ("scalar".into(), Tensor::scalar(f64::MIN_POSITIVE)),
        ]
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode(&sample());
        let back = decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn bad_magic_is_named() {
        let mut bytes = encode(&sample());
        bytes[..4].copy_from_slice(b"P5\n1");
        let e = decode(&bytes).unwrap_err();
        assert!(e.contains("PDSW") && e.contains("P5"), "{e}");
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 1]).unwrap_err().contains("truncated"));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer).unwrap_err().contains("trailing"));
    }
}
