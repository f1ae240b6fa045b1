//! Tiny binary container shared by dataset and checkpoint files.
//!
//! Layout: 8-byte magic, u32 format version, payload, SHA-256 digest of all
//! preceding bytes. Integers and floats are little-endian. A bad magic or
//! digest reads as a corrupt file; a good digest with an unexpected version
//! reads as a version mismatch.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut buf = Vec::with_capacity(4096);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f32_slice(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn into_bytes(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.into_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader {
    buf: Vec<u8>,
    pos: usize,
    path: PathBuf,
}

impl Reader {
    /// Read a file, verify magic, digest, and format version.
    pub fn open(path: &Path, magic: &[u8; 8], expected_version: u32) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(buf, path, magic, expected_version)
    }

    pub fn from_bytes(
        buf: Vec<u8>,
        path: &Path,
        magic: &[u8; 8],
        expected_version: u32,
    ) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if buf.len() < 8 + 4 + 32 {
            return Err(corrupt("file too short"));
        }
        if &buf[..8] != magic {
            return Err(corrupt("bad magic"));
        }
        let (payload, stored_digest) = buf.split_at(buf.len() - 32);
        let digest = Sha256::digest(payload);
        if digest.as_slice() != stored_digest {
            return Err(corrupt("checksum mismatch (truncated or damaged)"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != expected_version {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: expected_version,
            });
        }
        let len = buf.len() - 32;
        let mut r = Self {
            buf,
            pos: 12,
            path: path.to_path_buf(),
        };
        r.buf.truncate(len);
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptFile {
                path: self.path.clone(),
                reason: "unexpected end of payload".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::CorruptFile {
            path: self.path.clone(),
            reason: "invalid utf-8 in string field".into(),
        })
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        Ok(self.take(n)?.to_vec())
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptFile {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    /// True when the whole payload has been consumed.
    pub fn exhausted(&self) -> bool {
        self.pos == self.buf.len()
    }
}
