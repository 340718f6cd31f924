//! `ODGC1` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ODGC1\n"
//! u32 entry count
//! per entry: u32 name length, UTF-8 name, u32 rank, u64 dims[rank], f64 data[product(dims)]
//! ```
//!
//! Entries are written in registry (lexicographic) order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"ODGC1\n";

pub fn encode(registry: &ParamRegistry) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(registry.len() as u32).to_le_bytes());
    for (name, t) in registry.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(AutodiffError::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamRegistry> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let count = cur.u32("entry count")?;
    let mut registry = ParamRegistry::new();
    for _ in 0..count {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|e| AutodiffError::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| {
            AutodiffError::Checkpoint(format!("tensor `{name}` too large"))
        })?, "data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| AutodiffError::Checkpoint(format!("tensor `{name}`: {e}")))?;
        if registry.contains(&name) {
            return Err(AutodiffError::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        registry.insert(name, t);
    }
    if cur.pos != bytes.len() {
        return Err(AutodiffError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(registry)
}

pub fn save(registry: &ParamRegistry, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(registry))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamRegistry> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut reg = ParamRegistry::new();
        reg.insert("a.b", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, f64::MIN_POSITIVE]).unwrap());
        let bytes = encode(&reg);
        assert_eq!(&bytes[..6], MAGIC);
        assert_eq!(decode(&bytes).unwrap(), reg);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn exact_layout() {
        let mut reg = ParamRegistry::new();
        reg.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let bytes = encode(&reg);
        let mut expected = b"ODGC1\n".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }
}
