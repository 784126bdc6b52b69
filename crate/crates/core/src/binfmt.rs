//! Little-endian container primitives shared by the anchor, checkpoint and
//! dataset files.

use crate::error::{PandError, Result};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn magic(&mut self, m: &[u8; 8]) {
        self.buf.extend_from_slice(m);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(PandError::Format(format!(
                "{field} truncated: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != magic {
            return Err(PandError::Format(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let v = self.u32("version")?;
        if v != expected {
            return Err(PandError::Format(format!(
                "unsupported version {v} (expected {expected})"
            )));
        }
        Ok(())
    }

    /// `count` floats; a short read names the expected size.
    pub fn f32s(&mut self, count: usize, field: &str) -> Result<Vec<f32>> {
        let need = count
            .checked_mul(4)
            .ok_or_else(|| PandError::Format(format!("{field} size overflows: {count} floats")))?;
        if self.remaining() < need {
            return Err(PandError::Format(format!(
                "{field} short: expected {count} floats ({need} bytes), found {} bytes",
                self.remaining()
            )));
        }
        let b = self.take(need, field)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn str(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let b = self.take(n, field)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| PandError::Format(format!("{field} is not valid UTF-8")))
    }

    pub fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(PandError::Format(format!(
                "{} trailing bytes after {what}",
                self.remaining()
            )));
        }
        Ok(())
    }
}
