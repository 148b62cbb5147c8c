//! Little-endian reader/writer shared by the checkpoint and raster formats.

use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4).map_err(|_| FormatError::BadMagic {
            expected: *expected,
            found: self.buf.to_vec(),
        })?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: *expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated {
            what: self.what,
            expected: usize::MAX,
            actual: self.buf.len(),
        })?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated {
                what: self.what,
                expected: end,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    /// Fails with a truncation error naming the full expected length when
    /// fewer than `n` bytes remain.
    pub fn require(&self, n: usize) -> Result<(), FormatError> {
        let expected = self.pos.saturating_add(n);
        if expected > self.buf.len() {
            return Err(FormatError::Truncated {
                what: self.what,
                expected,
                actual: self.buf.len(),
            });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u16_vec(&mut self, n: usize) -> Result<Vec<u16>, FormatError> {
        self.require(n.checked_mul(2).ok_or(FormatError::invalid("length", "overflow"))?)?;
        let b = self.take(n * 2)?;
        Ok(b.chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect())
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        self.require(n.checked_mul(4).ok_or(FormatError::invalid("length", "overflow"))?)?;
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn finish(self) -> Result<(), FormatError> {
        let trailing = self.buf.len() - self.pos;
        if trailing != 0 {
            return Err(FormatError::TrailingBytes { trailing });
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn with_magic(magic: &[u8; 4]) -> Self {
        let mut w = Writer::default();
        w.buf.extend_from_slice(magic);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u16s(&mut self, v: &[u16]) {
        self.buf.reserve(v.len() * 2);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f32s(&mut self, v: impl IntoIterator<Item = f32>) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

/// One parameter block as stored on disk. `dims` is `[out, in, kh, kw]`;
/// fully connected layers use `[out, in, 1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub dims: [u32; 4],
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn write_blocks(magic: &[u8; 4], header: &[u32], blocks: &[ParamBlock]) -> Vec<u8> {
    let mut w = Writer::with_magic(magic);
    for &h in header {
        w.u32(h);
    }
    w.u32(blocks.len() as u32);
    for b in blocks {
        for d in b.dims {
            w.u32(d);
        }
        w.f32s(b.weight.iter().copied());
        w.f32s(b.bias.iter().copied());
    }
    w.buf
}

/// Reads `header_len` leading u32 values and the block list that follows.
pub(crate) fn read_blocks(
    bytes: &[u8],
    magic: &[u8; 4],
    what: &'static str,
    header_len: usize,
) -> Result<(Vec<u32>, Vec<ParamBlock>), FormatError> {
    let mut r = Reader::new(bytes, what);
    r.magic(magic)?;
    let header = (0..header_len).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let count = r.u32()? as usize;
    let mut blocks = Vec::new();
    for _ in 0..count {
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        if dims.contains(&0) {
            return Err(FormatError::ZeroDimension("parameter block"));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| FormatError::invalid("dims", "size overflows"))?;
        let weight = r.f32_vec(n)?;
        let bias = r.f32_vec(dims[0] as usize)?;
        blocks.push(ParamBlock { dims, weight, bias });
    }
    r.finish()?;
    Ok((header, blocks))
}

pub(crate) fn u32_len(n: usize, field: &'static str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::contract(format!("{field} {n} does not fit in u32")))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a file and runs `decode`, attaching the path to any parse error.
pub(crate) fn decode_file<T>(
    path: &Path,
    decode: impl FnOnce(&[u8]) -> Result<T, FormatError>,
) -> Result<T> {
    let bytes = read_file(path)?;
    decode(&bytes).map_err(|e| Error::parse(path, e))
}
