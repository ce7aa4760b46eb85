//! Binary envelope shared by every file format the crate writes.
//!
//! Layout: 8-byte magic, 4-byte big-endian version, body, then a 4-byte
//! big-endian CRC-32 (IEEE) of the body. Integers in the body are big-endian
//! `u32`; reals are little-endian IEEE-754 `f32`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) type Magic = [u8; 8];

pub(crate) struct EnvelopeWriter {
    out: Vec<u8>,
}

impl EnvelopeWriter {
    pub fn new(magic: &Magic, version: u32) -> Self {
        let mut out = Vec::with_capacity(1 << 16);
        out.extend_from_slice(magic);
        out.extend_from_slice(&version.to_be_bytes());
        Self { out }
    }

    pub fn reserve(&mut self, additional: usize) {
        self.out.reserve(additional);
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.out.extend_from_slice(&v.to_be_bytes());
        self
    }

    /// Writes a `usize` as `u32`, failing if it does not fit.
    pub fn dim(&mut self, v: usize, what: &str) -> Result<&mut Self> {
        let v = u32::try_from(v)
            .map_err(|_| Error::Parameter(format!("{what} = {v} exceeds the u32 file limit")))?;
        Ok(self.u32(v))
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.out.extend_from_slice(b);
        self
    }

    pub fn f32s(&mut self, values: impl IntoIterator<Item = f32>) -> &mut Self {
        for v in values {
            self.out.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.out[12..]);
        self.out.extend_from_slice(&crc.to_be_bytes());
        self.out
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.finish()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct EnvelopeReader<'a> {
    what: &'static str,
    body: &'a [u8],
    pos: usize,
}

impl<'a> EnvelopeReader<'a> {
    pub fn open(bytes: &'a [u8], magic: &Magic, version: u32, what: &'static str) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        if bytes.len() < 16 {
            return Err(Error::Truncation(format!("{what}: file shorter than its envelope")));
        }
        let found = u32::from_be_bytes(bytes[8..12].try_into().unwrap());
        if found != version {
            return Err(Error::Format(format!(
                "{what}: unsupported version {found} (expected {version})"
            )));
        }
        Ok(Self {
            what,
            body: &bytes[12..],
            pos: 0,
        })
    }

    fn available(&self) -> usize {
        self.body.len().saturating_sub(4).saturating_sub(self.pos)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.available() {
            return Err(Error::Truncation(format!(
                "{}: payload needs {n} more bytes, {} present",
                self.what,
                self.available()
            )));
        }
        let slice = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn dim(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let len = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{}: declared size overflows", self.what)))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Verifies that the body was consumed exactly and the checksum matches.
    pub fn finish(self) -> Result<()> {
        if self.available() != 0 {
            return Err(Error::Format(format!(
                "{}: {} unexpected trailing bytes",
                self.what,
                self.available()
            )));
        }
        let (payload, stored) = self.body.split_at(self.pos);
        let stored = u32::from_be_bytes(stored.try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(Error::Format(format!("{}: checksum mismatch", self.what)));
        }
        Ok(())
    }
}

/// Streaming counterpart of [`EnvelopeWriter`] for payloads too large to
/// buffer in memory.
pub(crate) struct StreamWriter {
    path: PathBuf,
    inner: BufWriter<File>,
    hasher: crc32fast::Hasher,
}

impl StreamWriter {
    pub fn create(path: &Path, magic: &Magic, version: u32) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut inner = BufWriter::with_capacity(1 << 20, file);
        inner
            .write_all(magic)
            .and_then(|_| inner.write_all(&version.to_be_bytes()))
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
            hasher: crc32fast::Hasher::new(),
        })
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.hasher.update(b);
        self.inner.write_all(b).map_err(|e| Error::io(&self.path, e))
    }

    pub fn dim(&mut self, v: usize, what: &str) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::Parameter(format!("{what} = {v} exceeds the u32 file limit")))?;
        self.bytes(&v.to_be_bytes())
    }

    pub fn f32s(&mut self, values: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    pub fn finish(mut self) -> Result<()> {
        let crc = self.hasher.clone().finalize();
        self.inner
            .write_all(&crc.to_be_bytes())
            .and_then(|_| self.inner.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) struct StreamReader {
    what: &'static str,
    path: PathBuf,
    inner: BufReader<File>,
    hasher: crc32fast::Hasher,
    remaining: u64,
}

impl StreamReader {
    pub fn open(path: &Path, magic: &Magic, version: u32, what: &'static str) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut inner = BufReader::with_capacity(1 << 20, file);
        let mut head = [0u8; 12];
        let got = read_up_to(&mut inner, &mut head).map_err(|e| Error::io(path, e))?;
        if got < 8 || &head[..8] != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        if got < 12 || len < 16 {
            return Err(Error::Truncation(format!("{what}: file shorter than its envelope")));
        }
        let found = u32::from_be_bytes(head[8..12].try_into().unwrap());
        if found != version {
            return Err(Error::Format(format!(
                "{what}: unsupported version {found} (expected {version})"
            )));
        }
        Ok(Self {
            what,
            path: path.to_path_buf(),
            inner,
            hasher: crc32fast::Hasher::new(),
            remaining: len - 16,
        })
    }

    pub fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        if buf.len() as u64 > self.remaining {
            return Err(Error::Truncation(format!(
                "{}: payload needs {} more bytes, {} present",
                self.what,
                buf.len(),
                self.remaining
            )));
        }
        self.inner.read_exact(buf).map_err(|e| Error::io(&self.path, e))?;
        self.hasher.update(buf);
        self.remaining -= buf.len() as u64;
        Ok(())
    }

    pub fn take(&mut self, n: usize) -> Result<Vec<u8>> {
        if n as u64 > self.remaining {
            return Err(Error::Truncation(format!(
                "{}: payload needs {n} more bytes, {} present",
                self.what, self.remaining
            )));
        }
        let mut buf = vec![0; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    pub fn dim(&mut self) -> Result<usize> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_be_bytes(b) as usize)
    }

    pub fn f32s_into(&mut self, out: &mut [f32]) -> Result<()> {
        let mut buf = vec![0u8; out.len() * 4];
        self.fill(&mut buf)?;
        for (o, c) in out.iter_mut().zip(buf.chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.remaining != 0 {
            return Err(Error::Format(format!(
                "{}: {} unexpected trailing bytes",
                self.what, self.remaining
            )));
        }
        let mut stored = [0u8; 4];
        self.inner
            .read_exact(&mut stored)
            .map_err(|e| Error::io(&self.path, e))?;
        if self.hasher.finalize() != u32::from_be_bytes(stored) {
            return Err(Error::Format(format!("{}: checksum mismatch", self.what)));
        }
        Ok(())
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..])? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
