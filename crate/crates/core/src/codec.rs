//! Little-endian cursor shared by the WFRS, WFDS and WFCK readers.

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], format: &'static str) -> Self {
        Reader { buf, pos: 0, format }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                format: self.format,
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Checks the 4-byte magic then the version byte.
    pub fn expect_header(&mut self, magic: &[u8; 4], version: u8) -> Result<()> {
        let found = &self.buf[..self.buf.len().min(4)];
        if found != magic {
            return Err(Error::BadMagic {
                expected: *magic,
                found: found.to_vec(),
            });
        }
        self.pos = 4;
        let v = self.u8()?;
        if v != version {
            return Err(Error::UnsupportedVersion {
                format: self.format,
                version: v,
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2)?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(LittleEndian::read_i64(self.take(8)?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::DimensionOverflow(format!("{n} float32 values")))?;
        let raw = self.take(bytes)?;
        let mut out = vec![0f32; n];
        LittleEndian::read_f32_into(raw, &mut out);
        Ok(out)
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::DimensionOverflow(format!("{n} float64 values")))?;
        let raw = self.take(bytes)?;
        let mut out = vec![0f64; n];
        LittleEndian::read_f64_into(raw, &mut out);
        Ok(out)
    }

    pub fn i8_vec(&mut self, n: usize) -> Result<Vec<i8>> {
        Ok(self.take(n)?.iter().map(|&b| b as i8).collect())
    }

    pub fn utf8(&mut self, n: usize) -> Result<String> {
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::MalformedHeader {
            format: self.format,
            reason: format!("name is not UTF-8: {e}"),
        })
    }

    pub fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::MalformedHeader {
            format: self.format,
            reason: reason.into(),
        }
    }
}

pub(crate) fn put_f32_slice(out: &mut Vec<u8>, values: &[f32]) {
    let start = out.len();
    out.resize(start + values.len() * 4, 0);
    LittleEndian::write_f32_into(values, &mut out[start..]);
}

pub(crate) fn put_f64_slice(out: &mut Vec<u8>, values: &[f64]) {
    let start = out.len();
    out.resize(start + values.len() * 8, 0);
    LittleEndian::write_f64_into(values, &mut out[start..]);
}

/// Writes a whole buffer to `path`, mapping failures to [`Error::Io`].
pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
