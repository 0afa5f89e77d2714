//! Flat little-endian weight file.
//!
//! ```text
//! "CGV1" | count: u32
//! repeated count times:
//!   name_len: u32 | name: [u8; name_len] (UTF-8) | rank: u32 | dims: [u32; rank] | data: [f32; prod(dims)]
//! ```

use std::fs;
use std::path::Path;

use super::array::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CGV1";

pub fn encode(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format {
            format: "checkpoint",
            detail: format!("truncated while reading {what} at byte {}", self.pos),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            format: "checkpoint",
            detail: "bad magic, expected CGV1".into(),
        });
    }
    let count = r.u32("tensor count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Format {
                format: "checkpoint",
                detail: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let bytes = r.take(n * 4, "tensor data")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            format: "checkpoint",
            detail: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(entries)
}

pub fn save(path: impl AsRef<Path>, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
