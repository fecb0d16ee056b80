//! Little-endian readers and writers shared by the file formats.

use crate::error::{FormatError, Result};

pub(crate) fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

pub(crate) fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, xs: impl IntoIterator<Item = f32>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Cursor whose every read names the section it belongs to, so a short
/// file reports where it ended.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize, section: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(FormatError::Truncated {
                section: section.to_string(),
            }
            .into());
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, section: &str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    pub(crate) fn u32(&mut self, section: &str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn bytes(&mut self, section: &str) -> Result<&'a [u8]> {
        let len = self.u32(section)? as usize;
        self.take(len, section)
    }

    pub(crate) fn f32s(&mut self, count: usize, section: &str) -> Result<Vec<f32>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| FormatError::Malformed(format!("{section}: size overflow")))?;
        Ok(self
            .take(len, section)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    /// Checks the 4-byte magic and the version word.
    pub(crate) fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            }
            .into());
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(FormatError::Version {
                expected: version,
                found: v,
            }
            .into());
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            ))
            .into());
        }
        Ok(())
    }
}
