//! Little-endian binary container shared by snapshot, basis and model files.
//!
//! Layout: 8-byte magic, body, then a trailing u64 checksum made of the first
//! eight bytes of the SHA-256 digest of everything before it. Readers verify
//! the checksum before decoding a single field, so a damaged file never
//! yields a partial result.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8]) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        Self { buf }
    }

    pub fn reserve(&mut self, bytes: usize) {
        self.buf.reserve(bytes);
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let sum = checksum(&self.buf);
        self.buf.extend_from_slice(&sum.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic and checksum, returning a cursor positioned after the magic.
    pub fn open(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(magic)
            )));
        }
        let split = bytes.len() - 8;
        let mut tail = [0u8; 8];
        tail.copy_from_slice(&bytes[split..]);
        let stored = u64::from_le_bytes(tail);
        let actual = checksum(&bytes[..split]);
        if stored != actual {
            return Err(Error::Format(format!(
                "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        Ok(Self {
            body: &bytes[..split],
            pos: 8,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.body.len())
            .ok_or_else(|| Error::Format(format!("truncated payload at byte {}", self.pos)))?;
        let out = &self.body[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(b))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("size {v} does not fit in memory")))
    }

    /// Reads a count and checks that `count * elem_bytes` bytes remain.
    pub fn count(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.usize()?;
        self.check_remaining(n, elem_bytes)?;
        Ok(n)
    }

    pub fn check_remaining(&self, n: usize, elem_bytes: usize) -> Result<()> {
        match n.checked_mul(elem_bytes) {
            Some(b) if b <= self.body.len() - self.pos => Ok(()),
            _ => Err(Error::Format(format!("declared size {n} exceeds the payload"))),
        }
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.check_remaining(n, 8)?;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.body.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Writes through a sibling temporary file and renames it into place so a
/// failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::Io(e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_scalars() {
        let mut w = Writer::new(b"TESTMAG1");
        w.u64(7);
        w.f64(-0.0);
        w.f64s(&[1.5, f64::MIN_POSITIVE]);
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TESTMAG1").unwrap();
        assert_eq!(r.u64().unwrap(), 7);
        assert_eq!(r.f64().unwrap().to_bits(), (-0.0f64).to_bits());
        assert_eq!(r.f64s(2).unwrap(), vec![1.5, f64::MIN_POSITIVE]);
        r.finish().unwrap();
    }

    #[test]
    fn detects_any_flipped_bit() {
        let mut w = Writer::new(b"TESTMAG1");
        w.f64s(&[1.0, 2.0, 3.0]);
        let bytes = w.finish();
        for pos in 8..bytes.len() {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(Reader::open(&bad, b"TESTMAG1"), Err(Error::Format(_))), "byte {pos}");
        }
    }

    #[test]
    fn oversized_count_is_rejected() {
        let mut w = Writer::new(b"TESTMAG1");
        w.u64(u64::MAX / 2);
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TESTMAG1").unwrap();
        assert!(r.count(8).is_err());
    }
}
