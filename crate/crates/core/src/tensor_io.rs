//! Portable named-tensor container.
//!
//! Byte layout, all integers and reals little-endian:
//!
//! ```text
//! "SEUT"            magic, 4 bytes
//! version: u32
//! count: u32
//! count entries of:
//!   name_len: u16, name: UTF-8 bytes
//!   rank: u8
//!   extents: rank x u64
//!   payload: prod(extents) x f64
//! ```
//!
//! Loading reconstructs every payload bit for bit; parse failures report
//! the byte offset where the file stopped making sense.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SEUT";
pub const FORMAT_VERSION: u32 = 1;

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, to_bytes(entries)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    from_bytes(&std::fs::read(path)?)
}

pub fn to_bytes(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Data(format!("too many tensors for one file: {}", entries.len())))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| Error::Data(format!("tensor name too long: {name:?}")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Data(format!("tensor {name:?} has too many axes")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(rank);
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(self.fail(format!("truncated {what}: need {n} bytes, have {have}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version_at = r.pos;
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: version_at as u64,
            msg: format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| Error::Format {
                offset: (name_at + e.valid_up_to()) as u64,
                msg: format!("entry {i} name is not UTF-8"),
            })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let extent_at = r.pos;
            let e = r.u64("extent")?;
            let e = usize::try_from(e).map_err(|_| Error::Format {
                offset: extent_at as u64,
                msg: format!("extent {e} does not fit in memory"),
            })?;
            numel = numel.checked_mul(e).ok_or_else(|| Error::Format {
                offset: extent_at as u64,
                msg: format!("tensor {name:?} extent product overflows"),
            })?;
            shape.push(e);
        }
        let payload = r.take(numel * 8, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data).unwrap()));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
    }
    Ok(out)
}
