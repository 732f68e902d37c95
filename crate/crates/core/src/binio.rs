//! Little-endian binary framing shared by the dataset cache and checkpoints.
//! Every file ends with a SHA-256 digest of the bytes before it.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) const DIGEST_LEN: usize = 32;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn u64s(&mut self, vs: &[u64]) {
        self.u64(vs.len() as u64);
        vs.iter().for_each(|&v| self.u64(v));
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|v| self.buf.extend_from_slice(&v.to_le_bytes()));
    }

    pub fn pairs(&mut self, ps: &[(usize, usize)]) {
        self.u64(ps.len() as u64);
        for &(a, b) in ps {
            self.u64(a as u64);
            self.u64(b as u64);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies the trailing digest and returns a reader over the body.
    pub fn open(data: &'a [u8], what: &str) -> Result<Self> {
        if data.len() < DIGEST_LEN {
            return Err(Error::Corrupt(format!("{what}: truncated ({} bytes)", data.len())));
        }
        let (body, digest) = data.split_at(data.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt(format!("{what}: checksum mismatch")));
        }
        Ok(Reader { buf: body, pos: 0 })
    }

    /// A reader without digest verification, for header sniffing.
    pub fn raw(data: &'a [u8]) -> Self {
        Reader { buf: data, pos: 0 }
    }

    pub fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated while reading {field}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    pub fn len(&mut self, field: &str, elem_size: usize) -> Result<usize> {
        let n = self.u64(field)?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem_size as u64) > remaining {
            return Err(Error::Corrupt(format!(
                "{field}: length {n} exceeds remaining {remaining} bytes"
            )));
        }
        Ok(n as usize)
    }

    pub fn str(&mut self, field: &str) -> Result<String> {
        let n = self.len(field, 1)?;
        let bytes = self.take(n, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt(format!("{field}: invalid UTF-8")))
    }

    pub fn u64s(&mut self, field: &str) -> Result<Vec<u64>> {
        let n = self.len(field, 8)?;
        (0..n).map(|_| self.u64(field)).collect()
    }

    pub fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Corrupt(format!("{field}: size overflow")))?,
            field,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn pairs(&mut self, field: &str) -> Result<Vec<(usize, usize)>> {
        let n = self.len(field, 16)?;
        (0..n)
            .map(|_| Ok((self.u64(field)? as usize, self.u64(field)? as usize)))
            .collect()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Checks magic and version before the digest so the error names the header.
pub(crate) fn check_header(data: &[u8], magic: &[u8; 4], version: u32, what: &str) -> Result<()> {
    let mut r = Reader::raw(data);
    let found = r
        .take(4, "magic")
        .map_err(|_| Error::Corrupt(format!("{what}: truncated header")))?;
    if found != magic {
        return Err(Error::Corrupt(format!(
            "{what}: bad magic bytes {:?} (expected {:?})",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r
        .u32("version")
        .map_err(|_| Error::Corrupt(format!("{what}: truncated header")))?;
    if v != version {
        return Err(Error::UnsupportedVersion {
            found: v,
            expected: version,
        });
    }
    Ok(())
}
