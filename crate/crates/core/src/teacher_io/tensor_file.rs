//! `APMT` tensor files.
//!
//! Layout (little-endian): magic `APMT`, `u32` version (1), `u32` rank,
//! `rank × u32` dims, then `product(dims)` `f32` values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"APMT";
pub const TENSOR_VERSION: u32 = 1;

/// Serialises `t` into `out`.
pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    let rank = u32::try_from(t.shape().len())
        .map_err(|_| Error::Config("tensor rank does not fit u32".into()))?;
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Config(format!("dimension {d} does not fit u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(4 * t.len());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * t.shape().len() + 4 * t.len());
    encode_tensor(t, &mut out)?;
    Ok(out)
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                what: self.what.to_string(),
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn magic(&mut self, what: &'static str, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic {
                what,
                expected,
                found,
            });
        }
        Ok(())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses one tensor starting at the reader's position.
pub(crate) fn decode_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    r.magic("tensor file", TENSOR_MAGIC)?;
    let version = r.u32()?;
    if version != TENSOR_VERSION {
        return Err(Error::Version {
            what: "tensor file",
            expected: TENSOR_VERSION,
            found: version,
        });
    }
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Config(format!("tensor dims {shape:?} overflow")))?;
    let payload = r.take(count)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(shape, data)
}

/// Parses a complete tensor file; trailing bytes are rejected.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "tensor file");
    let t = decode_tensor(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::Config(format!(
            "tensor file has {} trailing bytes",
            r.remaining()
        )));
    }
    Ok(t)
}

/// Writes `bytes` next to `path` and renames into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &tensor_to_bytes(t)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    tensor_from_bytes(&read_file(path)?).map_err(|e| match e {
        Error::Truncated {
            needed, available, ..
        } => Error::Truncated {
            what: path.display().to_string(),
            needed,
            available,
        },
        other => other,
    })
}
